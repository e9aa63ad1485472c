// SPDX-License-Identifier: MIT OR Apache-2.0

//! Straight-line transformer evaluation with nested loops, used as an
//! independent oracle for the graph executor.

#![allow(dead_code)]

use ablation_core::Weights;
use ablation_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &x) in row.iter().enumerate() {
                for j in 0..n {
                    out[j] += x * b[k][j];
                }
            }
            out
        })
        .collect()
}

fn add_bias(a: &mut Mat, b: &Tensor) {
    for row in a.iter_mut() {
        for (x, y) in row.iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn normalize(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Per-head outputs in `d_head` space and the final distributions.
pub struct Reference {
    pub z: Vec<Vec<Mat>>,
    pub attn_out: Vec<Vec<Mat>>,
    pub probs: Mat,
}

/// Evaluates the model; `zero_head` replaces that head's pre-projection
/// output with zeros at every position except 0.
pub fn evaluate(w: &Weights, tokens: &[u32], zero_head: Option<(usize, usize)>) -> Reference {
    let s = tokens.len();
    let te = mat(&w.tok_embed);
    let pe = mat(&w.pos_embed);
    let mut resid: Mat = (0..s).map(|j| te[tokens[j] as usize].iter().zip(&pe[j]).map(|(a, b)| a + b).collect()).collect();
    let mut zs = Vec::new();
    let mut outs = Vec::new();
    for (l, layer) in w.layers.iter().enumerate() {
        let r = normalize(&resid);
        let mut mresid = resid.clone();
        let mut lz = Vec::new();
        let mut lo = Vec::new();
        for (h, head) in layer.heads.iter().enumerate() {
            let mut q = matmul(&r, &mat(&head.w_q));
            add_bias(&mut q, &head.b_q);
            let mut k = matmul(&r, &mat(&head.w_k));
            add_bias(&mut k, &head.b_k);
            let mut v = matmul(&r, &mat(&head.w_v));
            add_bias(&mut v, &head.b_v);
            let dh = v[0].len();
            let mut z = vec![vec![0.0; dh]; s];
            for i in 0..s {
                let scores: Vec<f64> = (0..=i).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum()).collect();
                let p = softmax(&scores);
                for (j, pj) in p.iter().enumerate() {
                    for c in 0..dh {
                        z[i][c] += pj * v[j][c];
                    }
                }
            }
            if zero_head == Some((l, h)) {
                for row in z.iter_mut().skip(1) {
                    row.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let mut o = matmul(&z, &mat(&head.w_o));
            add_bias(&mut o, &head.b_o);
            mresid = add(&mresid, &o);
            lz.push(z);
            lo.push(o);
        }
        let r2 = normalize(&mresid);
        let mut hid = matmul(&r2, &mat(&layer.w_in));
        add_bias(&mut hid, &layer.b_in);
        hid.iter_mut().for_each(|row| row.iter_mut().for_each(|x| *x = x.max(0.0)));
        let mut m = matmul(&hid, &mat(&layer.w_out));
        add_bias(&mut m, &layer.b_out);
        resid = add(&mresid, &m);
        zs.push(lz);
        outs.push(lo);
    }
    let logits = matmul(&normalize(&resid), &mat(&w.w_unembed));
    Reference { z: zs, attn_out: outs, probs: logits.iter().map(|r| softmax(r)).collect() }
}
