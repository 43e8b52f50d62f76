//! Build a small 3D conv net, check its gradients against central
//! differences in f64, then take a few Adam steps in f32.

use shapecomp::nn::{grad_check, half_squared_error, AdamConfig, AdamState, LayerSpec, Mode, Network, Tensor};

fn specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv3d { in_channels: 2, out_channels: 4 },
        LayerSpec::BatchNorm { channels: 4 },
        LayerSpec::Relu,
        LayerSpec::MaxPool3d { window: [2, 2, 2] },
        LayerSpec::Reshape { shape: vec![4 * 8] },
        LayerSpec::Dense { inputs: 32, outputs: 3 },
    ]
}

fn main() -> shapecomp::Result<()> {
    let shape = [2, 4, 4, 4];
    let x: Vec<f64> = (0..3 * 128).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let target = vec![0.5; 9];

    let mut net = Network::<f64>::new(&shape, specs())?;
    net.glorot_init(1);
    let input = Tensor::from_vec(&[3, 2, 4, 4, 4], x.clone())?;
    let err = grad_check(&mut net, &input, Mode::Train, 1e-5, |o| half_squared_error(o, &target))?;
    println!("{} parameters, worst relative gradient error {err:.2e}", net.param_count());

    let mut net = Network::<f32>::new(&shape, specs())?;
    net.glorot_init(1);
    let input = Tensor::from_vec(&[3, 2, 4, 4, 4], x.iter().map(|&v| v as f32).collect())?;
    let mut adam = AdamState::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    for step in 0..20 {
        net.zero_grads();
        let out = net.forward(input.clone(), Mode::Train)?;
        let (loss, g) = half_squared_error(&out.cast::<f64>(), &target);
        net.backward(&g.cast::<f32>())?;
        adam.step(&mut [&mut net])?;
        if step % 5 == 0 {
            println!("step {step}: loss {loss:.4}");
        }
    }
    Ok(())
}
