//! Flat parameter storage with Adam state and EMA target tracking.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::nn::NnError;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Adam constants. The canonical defaults; bias correction is applied.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Flat parameter vector plus gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct ParamStore {
    id: u64,
    params: Vec<f64>,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl ParamStore {
    pub fn zeros(n: usize) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: vec![0.0; n],
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn from_vec(params: Vec<f64>) -> Self {
        let n = params.len();
        let mut s = Self::zeros(n);
        s.params = params;
        s
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Standard Adam update from an explicit gradient vector.
    pub fn adam_step(&mut self, grad: &[f64], lr: f64) -> Result<(), NnError> {
        if grad.len() != self.params.len() {
            return Err(NnError::DimMismatch {
                what: "adam gradient",
                expected: self.params.len(),
                actual: grad.len(),
            });
        }
        let bad: Vec<usize> = grad
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_finite())
            .map(|(i, _)| i)
            .take(8)
            .collect();
        if !bad.is_empty() {
            return Err(NnError::NonFiniteGradient { indices: bad });
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..self.params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            self.params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }

    /// Adam update from the accumulated gradient buffer; clears it afterwards.
    pub fn adam_step_accumulated(&mut self, lr: f64) -> Result<(), NnError> {
        let grad = std::mem::take(&mut self.grad);
        let result = self.adam_step(&grad, lr);
        self.grad = grad;
        self.zero_grad();
        result
    }
}

/// Exponential moving average of a tracked ParamStore.
#[derive(Debug, Clone)]
pub struct EmaTracker {
    shadow: Vec<f64>,
    alpha: f64,
}

impl EmaTracker {
    /// `alpha` is the retention rate: shadow <- alpha*shadow + (1-alpha)*param.
    pub fn new(init: &ParamStore, alpha: f64) -> Result<Self, NnError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(NnError::InvalidEmaRate { alpha });
        }
        Ok(EmaTracker {
            shadow: init.params().to_vec(),
            alpha,
        })
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<(), NnError> {
        if params.len() != self.shadow.len() {
            return Err(NnError::DimMismatch {
                what: "ema tracked params",
                expected: self.shadow.len(),
                actual: params.len(),
            });
        }
        let a = self.alpha;
        for (s, &p) in self.shadow.iter_mut().zip(params.params()) {
            *s = a * *s + (1.0 - a) * p;
        }
        Ok(())
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    /// Read-only snapshot usable wherever a ParamStore is expected.
    pub fn as_store(&self) -> ParamStore {
        ParamStore::from_vec(self.shadow.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    n_params: usize,
    step: u64,
    seed: u64,
    dims: Vec<usize>,
}

/// Write parameters as a JSON header line followed by little-endian f64s.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    dims: &[usize],
    seed: u64,
) -> Result<(), NnError> {
    let header = CheckpointHeader {
        n_params: store.len(),
        step: store.step_count(),
        seed,
        dims: dims.to_vec(),
    };
    let mut f = std::fs::File::create(path).map_err(NnError::Io)?;
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(NnError::Io)?;
    let mut buf = Vec::with_capacity(store.len() * 8);
    for &p in store.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    f.write_all(&buf).map_err(NnError::Io)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Vec<usize>, u64), NnError> {
    let mut f = std::fs::File::open(path).map_err(NnError::Io)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(NnError::Io)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(NnError::BadCheckpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
    let body = &bytes[nl + 1..];
    if body.len() != header.n_params * 8 {
        return Err(NnError::BadCheckpoint(format!(
            "expected {} payload bytes, found {}",
            header.n_params * 8,
            body.len()
        )));
    }
    let mut params = Vec::with_capacity(header.n_params);
    for chunk in body.chunks_exact(8) {
        params.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let mut store = ParamStore::from_vec(params);
    store.step = header.step;
    Ok((store, header.dims, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = ParamStore::from_vec(vec![1.0, -2.0, 3.0]);
        s.adam_step(&[0.0, 0.0, 0.0], 1e-3).unwrap();
        assert_eq!(s.params(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        // bias-corrected first step: delta = -lr * g / (|g| + eps) ~ -lr*sign(g)
        let mut s = ParamStore::from_vec(vec![0.0, 0.0]);
        s.adam_step(&[0.3, -7.0], 0.01).unwrap();
        assert!((s.params()[0] + 0.01).abs() < 1e-6);
        assert!((s.params()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = ParamStore::from_vec(vec![0.0]);
        for _ in 0..100 {
            s.adam_step(&[2.0], 0.01).unwrap();
        }
        assert!(s.params()[0] < -0.5);
    }

    #[test]
    fn non_finite_gradient_reports_indices() {
        let mut s = ParamStore::from_vec(vec![0.0, 0.0, 0.0]);
        let err = s.adam_step(&[0.0, f64::NAN, f64::INFINITY], 1e-3).unwrap_err();
        match err {
            NnError::NonFiniteGradient { indices } => assert_eq!(indices, vec![1, 2]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ema_extremes() {
        let p = ParamStore::from_vec(vec![1.0, 1.0]);
        let mut keep = EmaTracker::new(&ParamStore::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        keep.update(&p).unwrap();
        assert_eq!(keep.shadow(), &[0.0, 0.0]);

        let mut copy = EmaTracker::new(&ParamStore::from_vec(vec![0.0, 0.0]), 0.0).unwrap();
        copy.update(&p).unwrap();
        assert_eq!(copy.shadow(), &[1.0, 1.0]);
    }

    #[test]
    fn ema_paper_rate() {
        let p = ParamStore::from_vec(vec![1.0]);
        let mut t = EmaTracker::new(&ParamStore::from_vec(vec![0.0]), 0.995).unwrap();
        t.update(&p).unwrap();
        assert!((t.shadow()[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn ema_contraction() {
        let p = ParamStore::from_vec(vec![2.0]);
        let alpha = 0.9;
        let mut t = EmaTracker::new(&ParamStore::from_vec(vec![0.0]), alpha).unwrap();
        let d0: f64 = 2.0;
        for k in 1..=20 {
            t.update(&p).unwrap();
            let d = (t.shadow()[0] - 2.0).abs();
            assert!(d <= alpha.powi(k) * d0 + 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.ckpt");
        let mut s = ParamStore::from_vec(vec![1.5, -0.25, 1e-300]);
        s.adam_step(&[1.0, 1.0, 1.0], 1e-3).unwrap();
        save_checkpoint(&path, &s, &[3, 1], 42).unwrap();
        let (loaded, dims, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params(), s.params());
        assert_eq!(loaded.step_count(), 1);
        assert_eq!(dims, vec![3, 1]);
        assert_eq!(seed, 42);
        std::fs::remove_dir_all(&dir).ok();
    }
}
