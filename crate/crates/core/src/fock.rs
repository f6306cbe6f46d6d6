//! Truncated multi-mode bosonic Fock register.

use std::collections::HashMap;

use crate::{Error, Result};

/// Occupation tuples `(n_1, …, n_r)` with `Σ n_l ≤ n_max`, enumerated lexicographically.
#[derive(Debug, Clone)]
pub struct FockRegister {
    n_modes: usize,
    n_max: usize,
    states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    totals: Vec<u32>,
    lowering: Vec<Vec<LoweringEntry>>,
}

/// Nonzero element `⟨dst| b_l |src⟩ = factor` of an annihilation operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoweringEntry {
    pub src: u32,
    pub dst: u32,
    pub factor: f64,
}

/// `C(n + k, k)` as `usize`, saturating on overflow.
pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Size `C(n_max + r, r)` of a register without building it.
pub fn register_size(n_modes: usize, n_max: usize) -> usize {
    binomial(n_max + n_modes, n_modes)
}

impl FockRegister {
    /// Builds the register, refusing bases larger than `limit`.
    pub fn with_limit(n_modes: usize, n_max: usize, limit: usize) -> Result<Self> {
        if n_max > u8::MAX as usize {
            return Err(Error::invalid("n_max", "at most 255 quanta supported"));
        }
        let size = register_size(n_modes, n_max);
        if size > limit {
            return Err(Error::BasisTooLarge { size, limit });
        }
        let mut states = Vec::with_capacity(size);
        let mut current = vec![0u8; n_modes];
        enumerate(&mut current, 0, n_max, &mut states);
        let index = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect::<HashMap<_, _>>();
        let totals = states.iter().map(|s| s.iter().map(|&x| u32::from(x)).sum()).collect();
        let mut lowering = vec![Vec::new(); n_modes];
        for (i, s) in states.iter().enumerate() {
            for (l, entries) in lowering.iter_mut().enumerate() {
                if s[l] > 0 {
                    let mut t = s.clone();
                    t[l] -= 1;
                    entries.push(LoweringEntry {
                        src: i as u32,
                        dst: index[&t] as u32,
                        factor: f64::from(s[l]).sqrt(),
                    });
                }
            }
        }
        Ok(Self { n_modes, n_max, states, index, totals, lowering })
    }

    pub fn new(n_modes: usize, n_max: usize) -> Result<Self> {
        Self::with_limit(n_modes, n_max, usize::MAX)
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[u8] {
        &self.states[i]
    }

    pub fn index_of(&self, occupations: &[u8]) -> Option<usize> {
        self.index.get(occupations).copied()
    }

    /// Total occupation `Σ_l n_l` of basis state `i`.
    pub fn total(&self, i: usize) -> u32 {
        self.totals[i]
    }

    /// Nonzero elements of `b_l`.
    pub fn lowering(&self, l: usize) -> &[LoweringEntry] {
        &self.lowering[l]
    }

    /// `out += coeff · b_l x`.
    #[inline]
    pub fn lower_add(&self, l: usize, coeff: crate::C64, x: &[crate::C64], out: &mut [crate::C64]) {
        for e in &self.lowering[l] {
            out[e.dst as usize] += coeff * e.factor * x[e.src as usize];
        }
    }

    /// `out += coeff · b_l† x`.
    #[inline]
    pub fn raise_add(&self, l: usize, coeff: crate::C64, x: &[crate::C64], out: &mut [crate::C64]) {
        for e in &self.lowering[l] {
            out[e.src as usize] += coeff * e.factor * x[e.dst as usize];
        }
    }

    /// Index map of this register into one with an extra trailing vacuum slot.
    pub fn append_map(&self, larger: &FockRegister) -> Vec<usize> {
        assert_eq!(larger.n_modes, self.n_modes + 1);
        assert_eq!(larger.n_max, self.n_max);
        self.states
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t.push(0);
                larger.index[&t]
            })
            .collect()
    }

    /// For each basis state: `(n_0, index of (n_1, …) in `smaller`)`.
    pub fn split_first_map(&self, smaller: &FockRegister) -> Vec<(usize, usize)> {
        assert_eq!(smaller.n_modes + 1, self.n_modes);
        assert_eq!(smaller.n_max, self.n_max);
        self.states.iter().map(|s| (usize::from(s[0]), smaller.index[&s[1..]])).collect()
    }
}

fn enumerate(current: &mut Vec<u8>, pos: usize, budget: usize, out: &mut Vec<Vec<u8>>) {
    if pos == current.len() {
        out.push(current.clone());
        return;
    }
    for n in 0..=budget {
        current[pos] = n as u8;
        enumerate(current, pos + 1, budget - n, out);
    }
    current[pos] = 0;
}
