//! 2D rotary embeddings: rotations keep vector norms and make query-key
//! dot products depend only on the coordinate offset.

use patchicl::model::rope_2d;
use patchicl::numerics::RngStream;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> patchicl::Result<()> {
    let mut rng = RngStream::new(0, 0);
    let q: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let k: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let rq = rope_2d(&q, (3.0, 7.0))?;
    println!("|q| = {:.12}, |rope(q)| = {:.12}", dot(&q, &q).sqrt(), dot(&rq, &rq).sqrt());
    for shift in [(0.0, 0.0), (5.0, -2.0), (40.0, 13.0)] {
        let a = rope_2d(&q, (3.0 + shift.0, 7.0 + shift.1))?;
        let b = rope_2d(&k, (1.0 + shift.0, 2.0 + shift.1))?;
        println!("offset (2, 5), shifted by {shift:?}: logit {:.12}", dot(&a, &b));
    }
    Ok(())
}
