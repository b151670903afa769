//! Word-sized modular arithmetic for odd moduli below 2^62.

#[inline(always)]
pub fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

#[inline(always)]
pub fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

#[inline(always)]
pub fn neg_mod(a: u64, q: u64) -> u64 {
    if a == 0 {
        0
    } else {
        q - a
    }
}

#[inline(always)]
pub fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

pub fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1 % q;
    base %= q;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, q);
        }
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    acc
}

/// Inverse of `a` modulo a prime `q` via Fermat.
pub fn inv_mod(a: u64, q: u64) -> u64 {
    pow_mod(a, q - 2, q)
}

/// Precomputed `floor(w * 2^64 / q)` for Shoup multiplication by a fixed `w`.
#[inline(always)]
pub fn shoup_precompute(w: u64, q: u64) -> u64 {
    (((w as u128) << 64) / q as u128) as u64
}

/// `a * w mod q` using the Shoup quotient estimate. Requires `q < 2^63`.
#[inline(always)]
pub fn mul_shoup(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let quot = ((a as u128 * w_shoup as u128) >> 64) as u64;
    let r = a.wrapping_mul(w).wrapping_sub(quot.wrapping_mul(q));
    if r >= q {
        r - q
    } else {
        r
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const SMALL: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in SMALL {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for a in SMALL {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..r {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest primitive 2n-th root of unity modulo prime `q` (requires `q ≡ 1 mod 2n`).
pub fn primitive_root_of_unity(two_n: u64, q: u64) -> Option<u64> {
    if (q - 1) % two_n != 0 || !two_n.is_power_of_two() {
        return None;
    }
    let cofactor = (q - 1) / two_n;
    (2..q).find_map(|g| {
        let w = pow_mod(g, cofactor, q);
        // order divides 2n; it is exactly 2n iff w^n = -1
        (pow_mod(w, two_n / 2, q) == q - 1).then_some(w)
    })
}

/// Centered lift of a residue into `(-q/2, q/2]`.
#[inline]
pub fn to_signed(a: u64, q: u64) -> i64 {
    if a > q / 2 {
        -((q - a) as i64)
    } else {
        a as i64
    }
}

#[inline]
pub fn from_signed(a: i64, q: u64) -> u64 {
    if a < 0 {
        let m = (a.unsigned_abs()) % q;
        neg_mod(m, q)
    } else {
        a as u64 % q
    }
}
