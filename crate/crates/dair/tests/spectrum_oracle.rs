use dair_core::{seed, Tape, Tensor};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Mean-removed 2-D DFT by rows then columns.
fn reference(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    for c in 0..w {
        let mut line: Vec<Complex64> = (0..h).map(|r| buf[r * w + c]).collect();
        col.process(&mut line);
        for (r, v) in line.into_iter().enumerate() {
            buf[r * w + c] = v;
        }
    }
    buf
}

#[test]
fn spectrum_matches_rustfft() {
    for (h, w) in [(8, 8), (16, 8), (6, 10), (7, 5)] {
        let mut rng = seed::rng(11, &[h as u64, w as u64]);
        let x = Tensor::<f64>::from_fn(&[2, 3, h, w], |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::<f64>::detached();
        let xv = t.constant(x.clone());
        let s = t.spectrum(xv).unwrap();
        let out = t.value(s).data().to_vec();
        let n = h * w;
        for b in 0..2 {
            for c in 0..3 {
                let plane = &x.data()[(b * 3 + c) * n..(b * 3 + c + 1) * n];
                let want = reference(plane, h, w);
                let mag = &out[(b * 6 + c) * n..(b * 6 + c + 1) * n];
                let phase = &out[(b * 6 + 3 + c) * n..(b * 6 + 4 + c) * n];
                for j in 0..n {
                    let r = mag[j].exp_m1();
                    let got = Complex64::new(r * phase[j].cos(), r * phase[j].sin());
                    assert!((got - want[j]).norm() < 1e-9, "{h}x{w} bin {j}: {got} vs {}", want[j]);
                }
            }
        }
    }
}
