use mabsa::nn::{Forward, Init};
use mabsa::numerics::{kernels, ParamStore, Rng, Tensor, Var, LN_EPS};
use mabsa::paf::{AttentionStage, EnhancedCrossAttention, PafConfig, PafParams};

pub type Mat = Vec<Vec<f64>>;

// ---- loop oracles -------------------------------------------------------

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

/// `softmax(q·kᵀ/√d_k + bias)·v`, one score at a time.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, bias: Option<&Mat>) -> (Mat, Mat) {
    let dk = q[0].len() as f64;
    let mut probs = vec![vec![0.0; k.len()]; q.len()];
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for i in 0..q.len() {
        let mut scores = vec![0.0; k.len()];
        for j in 0..k.len() {
            let mut s = 0.0;
            for t in 0..q[0].len() {
                s += q[i][t] * k[j][t];
            }
            scores[j] = s / dk.sqrt() + bias.map_or(0.0, |b| b[i][j]);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for j in 0..k.len() {
            probs[i][j] = (scores[j] - max).exp() / z;
            for t in 0..v[0].len() {
                out[i][t] += probs[i][j] * v[j][t];
            }
        }
    }
    (out, probs)
}

pub fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|&v| kernels::gelu(v)).collect())
        .collect()
}

// ---- helpers ------------------------------------------------------------

pub fn random_mat(rng: &mut Rng, n: usize, m: usize) -> Mat {
    (0..n).map(|_| (0..m).map(|_| rng.normal(0.0, 1.0)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store
        .get(store.find(name).unwrap_or_else(|| panic!("no {name}")))
        .clone()
}

pub fn param_mat(store: &ParamStore, name: &str) -> Mat {
    param(store, name).to_rows()
}

pub fn param_vec(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).data().to_vec()
}

pub fn set(store: &mut ParamStore, name: &str, value: f64) {
    let id = store.find(name).unwrap();
    let n = store.get(id).numel();
    store.set(id, &vec![value; n]).unwrap();
}

/// Overwrite every parameter with N(0, scale²) noise so biases, gates and
/// relative tables are all exercised.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let v: Vec<f64> = (0..n).map(|_| rng.normal(0.0, scale)).collect();
        store.set(id, &v).unwrap();
    }
}

pub fn assert_close(a: &Tensor, b: &Mat, tol: f64) {
    let b = tensor(b);
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

pub fn stage_oracle(store: &ParamStore, name: &str, text: &Mat, image: &Mat, anchor: &Mat) -> Mat {
    let w = |s: &str| param_mat(store, &format!("{name}.{s}"));
    let v = |s: &str| param_vec(store, &format!("{name}.{s}"));
    let (h_self, _) = attention(
        &mm(text, &w("self_q")),
        &mm(text, &w("self_k")),
        &mm(text, &w("self_v")),
        None,
    );
    let (h_cross, _) = attention(
        &mm(&h_self, &w("cross_q")),
        &mm(image, &w("cross_k")),
        &mm(image, &w("cross_v")),
        None,
    );
    let up = gelu(&add_bias(&mm(&h_cross, &w("ffn.up.weight")), &v("ffn.up.bias")));
    let ffn = add_bias(&mm(&up, &w("ffn.down.weight")), &v("ffn.down.bias"));
    layer_norm(&add(anchor, &ffn), &v("norm.gamma"), &v("norm.beta"))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn stage3_oracle(store: &ParamStore, cfg: &PafConfig, text: &Mat, image: &Mat) -> Mat {
    let w = |s: &str| param_mat(store, &format!("paf.stage3.{s}"));
    let (n, kk) = (text.len(), image.len());
    let tv = w("rel_bias_tv");
    let p = w("rel_bias");
    let bias: Mat = (0..n)
        .map(|i| {
            (0..kk)
                .map(|j| tv[i][j] + if cfg.self_bias { p[i][j] } else { 0.0 })
                .collect()
        })
        .collect();
    let q = mm(text, &w("q"));
    let k = mm(image, &w("k"));
    let v = mm(image, &w("v"));
    let dk = cfg.d_hidden / cfg.n_heads;
    let mut heads = vec![Vec::new(); n];
    for h in 0..cfg.n_heads {
        let (o, _) = attention(
            &cols(&q, h * dk, dk),
            &cols(&k, h * dk, dk),
            &cols(&v, h * dk, dk),
            Some(&bias),
        );
        for i in 0..n {
            heads[i].extend_from_slice(&o[i]);
        }
    }
    let h = mm(&heads, &w("out"));
    let g: Vec<f64> = param_vec(store, "paf.stage3.gate")
        .iter()
        .map(|&x| sigmoid(x))
        .collect();
    let mixed: Mat = (0..n)
        .map(|i| {
            (0..cfg.d_hidden)
                .map(|j| g[j] * h[i][j] + (1.0 - g[j]) * text[i][j])
                .collect()
        })
        .collect();
    layer_norm(
        &mixed,
        &param_vec(store, "paf.stage3.norm.gamma"),
        &param_vec(store, "paf.stage3.norm.beta"),
    )
}

pub fn tiny_cfg(n_heads: usize) -> PafConfig {
    PafConfig {
        d_hidden: 4,
        n_heads,
        dropout_p: 0.1,
        l_max: 5,
        self_bias: true,
    }
}

pub fn build_stage(seed: u64) -> (ParamStore, AttentionStage) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let stage = AttentionStage::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "s",
        4,
        0.1,
    );
    randomize(&mut store, seed + 100, 0.7);
    (store, stage)
}

pub fn build_stage3(cfg: &PafConfig, seed: u64) -> (ParamStore, EnhancedCrossAttention) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let s3 = EnhancedCrossAttention::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        cfg,
    );
    randomize(&mut store, seed + 100, 0.7);
    (store, s3)
}

pub fn build_paf(cfg: &PafConfig, d_model: usize, seed: u64) -> (ParamStore, PafParams) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let paf = PafParams::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        cfg,
        d_model,
    )
    .unwrap();
    (store, paf)
}

pub fn run_stage(
    store: &ParamStore,
    stage: &AttentionStage,
    text: &Mat,
    image: &Mat,
    anchor: &Mat,
) -> (Tensor, Tensor) {
    let mut f = Forward::eval(store);
    let t = f.input(tensor(text));
    let v = f.input(tensor(image));
    let a = f.input(tensor(anchor));
    let tr = stage.forward(&mut f, t, v, a).unwrap();
    (f.tape.value(tr.out).clone(), f.tape.value(tr.cross_probs).clone())
}

pub fn run_stage3(
    store: &ParamStore,
    s3: &EnhancedCrossAttention,
    text: &Mat,
    image: &Mat,
) -> (Tensor, Tensor, Vec<Tensor>) {
    let mut f = Forward::eval(store);
    let t = f.input(tensor(text));
    let v = f.input(tensor(image));
    let tr = s3.forward(&mut f, t, v).unwrap();
    let probs = tr.probs.iter().map(|p| f.tape.value(*p).clone()).collect();
    (f.tape.value(tr.out).clone(), f.tape.value(tr.pre_norm).clone(), probs)
}

pub fn run_paf(store: &ParamStore, paf: &PafParams, text: &Mat, image: &Mat, fuse: bool) -> (Tensor, Vec<Tensor>) {
    let mut f = Forward::eval(store);
    let t = f.input(tensor(text));
    let v = f.input(tensor(image));
    let out = paf.forward(&mut f, t, v, fuse).unwrap();
    let mut probs: Vec<Var> = out.stages.iter().flat_map(|s| [s.self_probs, s.cross_probs]).collect();
    if let Some(c) = &out.cross {
        probs.extend(c.probs.iter().copied());
    }
    let probs = probs.into_iter().map(|p| f.tape.value(p).clone()).collect();
    (f.tape.value(out.fused).clone(), probs)
}
