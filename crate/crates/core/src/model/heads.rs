use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

/// φ′: two dense layers over `[e; m]` with one GELU, `-> C` logits.
#[derive(Clone, Debug)]
pub struct PhiPrime {
    pub d: usize,
    pub d_m: usize,
    pub hidden: usize,
    pub categories: usize,
    pub params: ParamStore,
    ids: [ParamId; 4],
}

impl PhiPrime {
    pub fn new(d: usize, d_m: usize, hidden: usize, categories: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let ids = [
            p.insert("phi_prime.0.w", ParamStore::xavier(&mut rng, d + d_m, hidden))?,
            p.insert("phi_prime.0.b", Tensor::zeros(vec![hidden]))?,
            p.insert("phi_prime.1.w", ParamStore::xavier(&mut rng, hidden, categories))?,
            p.insert("phi_prime.1.b", Tensor::zeros(vec![categories]))?,
        ];
        Ok(PhiPrime {
            d,
            d_m,
            hidden,
            categories,
            params: p,
            ids,
        })
    }

    pub fn input_width(&self) -> usize {
        self.d + self.d_m
    }

    /// `x: [n, d + d_m] -> [n, C]`.
    pub fn forward(&self, tape: &mut Tape<f32>, bind: &mut Binding, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.input_width() {
            return Err(Error::shape(
                "head_phi_prime",
                format!("input {:?}, expected width {}", tape.shape(x), self.input_width()),
            ));
        }
        let v = |tape: &mut Tape<f32>, bind: &mut Binding, i: usize| bind.var(tape, &self.params, self.ids[i]);
        let (w0, b0, w1, b1) = (v(tape, bind, 0), v(tape, bind, 1), v(tape, bind, 2), v(tape, bind, 3));
        let h = tape.linear(x, w0, b0)?;
        let h = tape.gelu(h)?;
        tape.linear(h, w1, b1)
    }

    /// No-grad logits for rows of `[e; m]`.
    pub fn logits(&self, rows: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::no_grad();
        let mut bind = Binding::new(&self.params);
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("head_phi_prime", "ragged input rows"));
        }
        let x = tape.constant(Tensor::new(vec![rows.len(), width], flat)?);
        let y = self.forward(&mut tape, &mut bind, x)?;
        Ok(tape.value(y).data().chunks(self.categories).map(<[f32]>::to_vec).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, d: usize, d_m: usize, hidden: usize, categories: usize) -> Result<Self> {
        let mut head = PhiPrime::new(d, d_m, hidden, categories, 0)?;
        let stored = ParamStore::load(path)?;
        for id in head.params.ids().collect::<Vec<_>>() {
            let name = head.params.name(id).to_string();
            let src = stored.id(&name).map(|j| stored.get(j).clone());
            match src {
                Some(t) if t.shape() == head.params.get(id).shape() => *head.params.get_mut(id) = t,
                _ => {
                    return Err(Error::Format {
                        what: "checkpoint",
                        detail: format!("refinement head parameter {name} missing or misshapen"),
                    })
                }
            }
        }
        Ok(head)
    }
}

/// Concatenates an embedding and a morphology vector.
pub fn join_features(e: &[f32], m: &[f32]) -> Vec<f32> {
    let mut v = Vec::with_capacity(e.len() + m.len());
    v.extend_from_slice(e);
    v.extend_from_slice(m);
    v
}
