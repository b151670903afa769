//! Negacyclic number-theoretic transform.
//!
//! Forward is Cooley-Tukey taking natural order to bit-reversed order, the
//! inverse is Gentleman-Sande taking it back. Twiddles are powers of a
//! primitive 2n-th root `psi`, so pointwise products in the transformed
//! domain are products in `Z_q[X]/(X^n+1)` with no extra twisting.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::modarith::{
    add_mod, inv_mod, mul_shoup, pow_mod, primitive_root_of_unity, shoup_precompute, sub_mod,
};

#[derive(Debug, Clone)]
pub struct NttTable {
    n: usize,
    q: u64,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

impl NttTable {
    pub fn new(n: usize, q: u64) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::InvalidParams("n must be a power of two"));
        }
        let psi = primitive_root_of_unity(2 * n as u64, q).ok_or(Error::InvalidParams(
            "q has no primitive 2n-th root of unity",
        ))?;
        let psi_inv = inv_mod(psi, q);
        let bits = n.trailing_zeros();
        let mut psi_rev = alloc::vec![0u64; n];
        let mut psi_inv_rev = alloc::vec![0u64; n];
        for (k, (fwd, inv)) in psi_rev.iter_mut().zip(psi_inv_rev.iter_mut()).enumerate() {
            let e = bit_reverse(k, bits) as u64;
            *fwd = pow_mod(psi, e, q);
            *inv = pow_mod(psi_inv, e, q);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| shoup_precompute(w, q)).collect();
        let psi_inv_rev_shoup = psi_inv_rev
            .iter()
            .map(|&w| shoup_precompute(w, q))
            .collect();
        let n_inv = inv_mod(n as u64 % q, q);
        Ok(Self {
            n,
            q,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: shoup_precompute(n_inv, q),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for i in 0..m {
                let j1 = 2 * i * t;
                let w = self.psi_rev[m + i];
                let ws = self.psi_rev_shoup[m + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = mul_shoup(a[j + t], w, ws, q);
                    a[j] = add_mod(u, v, q);
                    a[j + t] = sub_mod(u, v, q);
                }
            }
            m <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            let mut j1 = 0;
            for i in 0..h {
                let w = self.psi_inv_rev[h + i];
                let ws = self.psi_inv_rev_shoup[h + i];
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = a[j + t];
                    a[j] = add_mod(u, v, q);
                    a[j + t] = mul_shoup(sub_mod(u, v, q), w, ws, q);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = mul_shoup(*x, self.n_inv, self.n_inv_shoup, q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_of_constant_is_constant() {
        let t = NttTable::new(8, 3329).unwrap();
        let mut a = [5u64, 0, 0, 0, 0, 0, 0, 0];
        t.forward(&mut a);
        assert!(a.iter().all(|&x| x == 5));
        t.inverse(&mut a);
        assert_eq!(a, [5, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn rejects_unfriendly_modulus() {
        // 3329 - 1 = 2^8 * 13, so n = 128 is the largest supported size
        assert!(NttTable::new(128, 3329).is_ok());
        assert!(NttTable::new(256, 3329).is_err());
        assert!(NttTable::new(12, 3329).is_err());
    }
}
