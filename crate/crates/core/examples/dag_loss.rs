//! DAG loss `|ln(tr(e^(M ⊙ M)) / d)|` of a few small matrices, including one whose
//! matrix exponential overflows in f32.
//!
//! `cargo run --example dag_loss`

use pldr::dag::{dag_loss, DagValue};
use pldr::expm::expm_trace;
use pldr::Tensor;

fn show<T: pldr::Scalar>(name: &str, m: Tensor<T>) -> pldr::Result<()> {
    let squared = Tensor::from_fn(m.shape(), |i| m.data()[i] * m.data()[i]);
    let (trace, _) = expm_trace(&squared)?;
    let (dl, overflow) = dag_loss(&[m])?;
    let value = DagValue::from_pair(dl.as_f64(), overflow);
    println!("{name:<28} tr(e^(M ⊙ M)) = {:<12.6e} DL = {}", trace.as_f64(), value.render());
    Ok(())
}

fn main() -> pldr::Result<()> {
    let d = 5;
    show("zeros(5, 5)", Tensor::<f64>::zeros(&[d, d]))?;
    show("identity(5)", Tensor::<f64>::eye(d))?;
    show("strictly upper triangular", Tensor::<f64>::from_fn(&[d, d], |i| (i % d > i / d) as u8 as f64 * 3.0))?;
    show("ones(2, 2)", Tensor::<f64>::ones(&[2, 2]))?;
    show("cycle 0 -> 1 -> 2 -> 0", Tensor::<f64>::from_fn(&[3, 3], |i| ((i / 3 + 1) % 3 == i % 3) as u8 as f64))?;
    show("full(4, 4, 9.0) in f32", Tensor::<f32>::full(&[4, 4], 9.0))?;
    show("full(4, 4, 9.0) in f64", Tensor::<f64>::full(&[4, 4], 9.0))?;
    Ok(())
}
