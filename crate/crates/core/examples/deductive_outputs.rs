//! One forward pass of a small model, printing the deductive outputs of
//! each layer: the metric A_LM, the potential A_P, the energy-curvature
//! tensor G_LM and the power coefficients, with their DAG losses.
//!
//! Parameters are perturbed away from initialization first.
//!
//! `cargo run --example deductive_outputs -- [v5|v9]`

use pldr::dag::dag_loss_stacked;
use pldr::data::TokenizerHandle;
use pldr::model::{Model, ModelConfig, ModelInput};
use pldr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn summary(name: &str, t: &Tensor<f64>) -> pldr::Result<()> {
    let (min, max) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (dl, overflow) = dag_loss_stacked(t)?;
    let dl = if overflow { "overflow".to_string() } else { format!("{dl:.4e}") };
    println!("    {name:<5} {:?} min {min:.4e} max {max:.4e} DL {dl}", t.shape());
    Ok(())
}

fn main() -> pldr::Result<()> {
    let flavor = std::env::args().nth(1).unwrap_or_else(|| "v5".into());
    let base = match flavor.as_str() {
        "v9" => ModelConfig::v9(2, 2, 32, 12, 8),
        _ => ModelConfig::v5(2, 2, 32),
    };
    let tok = TokenizerHandle::byte_level();
    let config = ModelConfig {
        vocab_size: tok.vocab_size(),
        context_length: 32,
        pad_id: tok.pad_id(),
        end_id: tok.end_id(),
        ..base
    };
    let mut model = Model::<f64>::new(config, 1)?;
    // at initialization P = 1 and W_G = I, so all three tensors coincide
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in model.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let ids: Vec<usize> = tok.encode_plain("a lamp at the end of the pier")?.into_iter().map(|i| i as usize).collect();
    let out = model.forward(&ModelInput::single(&ids)?)?;
    println!("{flavor}: {} tokens, logits {:?}", ids.len(), out.logits.shape());
    for (l, layer) in out.deductive.layers.iter().enumerate() {
        println!("  layer {l}");
        summary("A_LM", &layer.a_lm)?;
        summary("A_P", &layer.a_p)?;
        summary("G_LM", &layer.g_lm)?;
        let p = layer.p.data();
        println!("    P     {:?} mean {:.4}", layer.p.shape(), p.iter().sum::<f64>() / p.len() as f64);
    }

    // a deductive output depends only on its prefix
    let prefix = model.forward(&ModelInput::single(&ids[..10])?)?;
    let full_at_9 = {
        let mut input = ModelInput::single(&ids)?;
        input.last = vec![9];
        model.forward(&input)?
    };
    let diff = prefix.deductive.layers[1].a_lm.max_abs_diff(&full_at_9.deductive.layers[1].a_lm);
    println!("A_LM at position 9: prefix-only vs full sequence differ by {diff:.1e}");
    Ok(())
}
