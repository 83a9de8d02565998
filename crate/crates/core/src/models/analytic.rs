use super::{ArchKind, ArchSpec, Model, NetworkBuilder, Role};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gridworld::{Action, Grid, ImgState, PosState, N_ACTIONS};

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {t}")))
    }
}

/// LC IDM with logits `W (s' - s) / τ`, written as one affine map on
/// `(s, s')` with weight `[-W | W]`.
pub fn analytic_idm_pos(temperature: f64) -> Result<Model> {
    check_temperature(temperature)?;
    let spec = ArchSpec::new(ArchKind::Lc, Role::Idm);
    let mut model = Model::build(spec, 0)?;
    let params = model.network_mut().params_mut();
    let w = params.get_mut("fc.weight").expect("LC has fc.weight");
    let data = w.data_mut();
    for a in Action::ALL {
        let (dx, dy) = a.delta();
        let row = [-dx, -dy, dx, dy].map(|v| v as f64 / temperature);
        data[a.index() * 4..a.index() * 4 + 4].copy_from_slice(&row);
    }
    params.get_mut("fc.bias").expect("LC has fc.bias").data_mut().fill(0.0);
    Ok(model)
}

/// Motion patches `V^a = x'_a - x_a`, rendered on an open 3x3 grid with the
/// player in the centre. Returned as `[4, 3, 3, 3]`.
pub fn motion_kernels() -> Result<Tensor> {
    let centre = PosState::new(1, 1);
    let grid = Grid::new(3, 3, vec![false; 9], centre, PosState::new(0, 0), 0)?;
    let before = grid.render_img(centre)?;
    let mut data = Vec::with_capacity(N_ACTIONS * ImgState::CHANNELS * 9);
    for a in Action::ALL {
        let after = grid.render_img(grid.step(centre, a)?)?;
        data.extend(after.data.iter().zip(&before.data).map(|(x1, x0)| x1 - x0));
    }
    Tensor::new(vec![N_ACTIONS, ImgState::CHANNELS, 3, 3], data)
}

/// CNN1 IDM with kernels `K^a = (-V^a, V^a) / τ` and zero bias: a motion
/// detector whose true-action score is `‖V^a‖²`.
pub fn analytic_idm_img(image_size: (usize, usize), temperature: f64) -> Result<Model> {
    check_temperature(temperature)?;
    let (h, w) = image_size;
    if h < 3 || w < 3 {
        return Err(Error::Parameter(format!("images must be at least 3x3, got {h}x{w}")));
    }
    let spec = ArchSpec::new(ArchKind::Cnn1, Role::Idm).with_image_size(h, w);
    let v = motion_kernels()?;
    let patch = ImgState::CHANNELS * 9;
    let mut kernel = Vec::with_capacity(N_ACTIONS * 2 * patch);
    for a in 0..N_ACTIONS {
        let va = &v.data()[a * patch..(a + 1) * patch];
        kernel.extend(va.iter().map(|x| -x / temperature));
        kernel.extend(va.iter().map(|x| x / temperature));
    }
    let mut net = NetworkBuilder::new(0)
        .conv3x3("conv", spec.input_channels(), N_ACTIONS, 0, false)
        .global_max()
        .build();
    let params = net.params_mut();
    params
        .get_mut("conv.weight")
        .expect("CNN1 has conv.weight")
        .data_mut()
        .copy_from_slice(&kernel);
    params.get_mut("conv.bias").expect("CNN1 has conv.bias").data_mut().fill(0.0);
    Ok(Model::from_network(spec, net))
}
