use super::CommitError;

/// Multiplicative group modulo a small prime. Elements are residues in
/// `[1, modulus)`; arithmetic is done in `u128` so any `u64` modulus is safe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyGroup {
    modulus: u64,
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

impl ToyGroup {
    pub fn new(modulus: u64) -> Result<ToyGroup, CommitError> {
        if !is_prime(modulus) || modulus > (1 << 32) {
            return Err(CommitError::InvalidParams(format!("toy modulus {modulus} must be a prime below 2^32")));
        }
        Ok(ToyGroup { modulus })
    }

    /// Like [`ToyGroup::new`] but also insists on `(modulus - 1) / 2` prime.
    pub fn safe_prime(modulus: u64) -> Result<ToyGroup, CommitError> {
        if modulus < 7 || !is_prime((modulus - 1) / 2) {
            return Err(CommitError::InvalidParams(format!("{modulus} is not a safe prime")));
        }
        ToyGroup::new(modulus)
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// Order of the quadratic-residue subgroup, `(q - 1) / 2`.
    pub fn qr_order(&self) -> u64 {
        (self.modulus - 1) / 2
    }

    pub fn byte_width(&self) -> usize {
        (64 - (self.modulus - 1).leading_zeros() as usize).div_ceil(8).max(1)
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.modulus as u128) as u64
    }

    pub fn pow(&self, base: u64, mut e: u64) -> u64 {
        let mut acc = 1u64;
        let mut b = base % self.modulus;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, b);
            }
            b = self.mul(b, b);
            e >>= 1;
        }
        acc
    }

    pub fn inv(&self, a: u64) -> u64 {
        self.pow(a, self.modulus - 2)
    }

    /// Smallest `k > 0` with `a^k = 1`. Linear walk; fine for toy sizes.
    pub fn element_order(&self, a: u64) -> u64 {
        let mut acc = a % self.modulus;
        let mut k = 1;
        while acc != 1 {
            acc = self.mul(acc, a);
            k += 1;
        }
        k
    }

    /// Map a digest to a quadratic residue by squaring a residue derived from it.
    pub fn hash_to_group(&self, digest: &[u8]) -> u64 {
        let v = digest.iter().take(16).fold(0u128, |acc, &b| (acc << 8) | b as u128);
        let x = (v % (self.modulus as u128 - 1)) as u64 + 1;
        self.mul(x, x)
    }
}
