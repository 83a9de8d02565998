const HEADER: &str = include_str!("../include/idmlab.h");
const SOURCE: &str = include_str!("../src/lib.rs");

#[test]
fn header_declares_every_export() {
    let exports: Vec<&str> = SOURCE
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 20);
    for name in exports {
        assert!(HEADER.contains(&format!("{name}(")), "{name} missing from idmlab.h");
    }
}

#[test]
fn header_has_status_codes_and_opaque_handles() {
    for item in ["IDMLAB_STATUS_OK = 0", "IDMLAB_STATUS_PANIC", "typedef struct IdmlabGrid IdmlabGrid", "typedef struct IdmlabModel IdmlabModel"] {
        assert!(HEADER.contains(item), "{item}");
    }
}
