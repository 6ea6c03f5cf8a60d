//! Paillier cryptosystem with signed fixed-point plaintexts.
//!
//! Reals are mapped into `Z_n` by scaling with `2^(f * exponent)` where `f` is
//! the number of fraction bits. Negative values live in the upper half of
//! `Z_n`: a mantissa above `n / 2` decodes as `mantissa - n`. Every ciphertext
//! remembers the exponent of its plaintext, and multiplying by an encoded
//! scalar adds one to it.

use alloc::vec::Vec;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction bits used when no other value is configured.
pub const DEFAULT_FRAC_BITS: u32 = 40;
/// Smallest accepted modulus length.
pub const MIN_KEY_BITS: u32 = 128;

const MILLER_RABIN_ROUNDS: usize = 32;

/// Short fingerprint of a modulus, carried by every ciphertext so that
/// operands from different keys are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(pub u64);

impl KeyId {
    fn of(n: &BigUint) -> Self {
        // FNV-1a over the little-endian bytes of n.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in n.to_bytes_le() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        KeyId(h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    half_n: BigUint,
    id: KeyId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CrtParams {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    p_minus_1: BigUint,
    q_minus_1: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    // Present when the factors are known (freshly generated keys).
    crt: Option<CrtParams>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// A signed real scaled into `Z_n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub mantissa: BigUint,
    pub exponent: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    value: BigUint,
    exponent: u32,
    key: KeyId,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn key_id(&self) -> KeyId {
        self.key
    }
}

/// Exact `2^k` for `k` in the normal f64 exponent range.
pub(crate) fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((1023 + k) as u64) << 52)
}

fn scale_bits(frac_bits: u32, exponent: u32) -> u32 {
    frac_bits * exponent
}

fn l_function(x: &BigUint, n: &BigUint) -> BigUint {
    (x - 1u32) / n
}

impl PublicKey {
    /// Rebuilds a public key from its modulus and generator. Only `g = n + 1`
    /// is supported.
    pub fn from_parts(n: BigUint, g: BigUint) -> Result<Self> {
        if n < BigUint::from(15u32) || n.is_even() {
            return Err(Error::InvalidKey("modulus must be an odd composite"));
        }
        if g != &n + 1u32 {
            return Err(Error::InvalidKey("generator must equal n + 1"));
        }
        Ok(Self::from_modulus(n))
    }

    fn from_modulus(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let g = &n + 1u32;
        let half_n = &n >> 1;
        let id = KeyId::of(&n);
        PublicKey {
            n,
            n_squared,
            g,
            half_n,
            id,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Encodes `v` with one scale application (`exponent = 1`).
    pub fn encode(&self, v: f64, frac_bits: u32) -> Result<FixedPoint> {
        self.encode_at(v, frac_bits, 1)
    }

    /// Encodes `v` scaled by `2^(frac_bits * exponent)`.
    pub fn encode_at(&self, v: f64, frac_bits: u32, exponent: u32) -> Result<FixedPoint> {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        let shift = scale_bits(frac_bits, exponent);
        if shift > 1000 {
            return Err(Error::EncodingOverflow { value: v, exponent });
        }
        let scaled = num_traits::Float::round(v * pow2(shift as i32));
        let magnitude = BigUint::from_f64(num_traits::Float::abs(scaled))
            .ok_or(Error::EncodingOverflow { value: v, exponent })?;
        if magnitude >= self.half_n {
            return Err(Error::EncodingOverflow { value: v, exponent });
        }
        let mantissa = if scaled < 0.0 && !magnitude.is_zero() {
            &self.n - magnitude
        } else {
            magnitude
        };
        Ok(FixedPoint { mantissa, exponent })
    }

    /// Decodes with the `mantissa > n/2 => negative` rule.
    pub fn decode(&self, x: &FixedPoint, frac_bits: u32) -> f64 {
        let (negative, magnitude) = if x.mantissa > self.half_n {
            (true, &self.n - &x.mantissa)
        } else {
            (false, x.mantissa.clone())
        };
        let mut value = magnitude.to_f64().unwrap_or(f64::INFINITY);
        let mut shift = scale_bits(frac_bits, x.exponent) as i32;
        while shift > 0 {
            let step = shift.min(1000);
            value *= pow2(-step);
            shift -= step;
        }
        if negative {
            -value
        } else {
            value
        }
    }

    /// Signed integer view of a mantissa, as (is_negative, magnitude).
    pub fn signed_parts(&self, mantissa: &BigUint) -> (bool, BigUint) {
        if mantissa > &self.half_n {
            (true, &self.n - mantissa)
        } else {
            (false, mantissa.clone())
        }
    }

    /// Plaintext subtraction in `Z_n` of two encodings at the same exponent.
    pub fn sub_plain(&self, a: &FixedPoint, b: &FixedPoint) -> Result<FixedPoint> {
        if a.exponent != b.exponent {
            return Err(Error::ExponentMismatch(a.exponent, b.exponent));
        }
        let mantissa = (&a.mantissa + &self.n - &b.mantissa) % &self.n;
        Ok(FixedPoint {
            mantissa,
            exponent: a.exponent,
        })
    }

    /// Plaintext addition in `Z_n` of two encodings at the same exponent.
    pub fn add_plain(&self, a: &FixedPoint, b: &FixedPoint) -> Result<FixedPoint> {
        if a.exponent != b.exponent {
            return Err(Error::ExponentMismatch(a.exponent, b.exponent));
        }
        Ok(FixedPoint {
            mantissa: (&a.mantissa + &b.mantissa) % &self.n,
            exponent: a.exponent,
        })
    }

    fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = random_below(rng, &self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, x: &FixedPoint, rng: &mut R) -> Result<Ciphertext> {
        let r = self.random_unit(rng);
        self.encrypt_with_nonce(x, &r)
    }

    /// Encryption with caller-chosen randomness `r`; `c = (1 + m n) r^n mod n^2`.
    pub fn encrypt_with_nonce(&self, x: &FixedPoint, r: &BigUint) -> Result<Ciphertext> {
        if x.mantissa >= self.n {
            return Err(Error::PlaintextOutOfRange);
        }
        let gm = (BigUint::one() + &x.mantissa * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: (gm * rn) % &self.n_squared,
            exponent: x.exponent,
            key: self.id,
        })
    }

    pub fn encrypt_real<R: RngCore + ?Sized>(
        &self,
        v: f64,
        frac_bits: u32,
        rng: &mut R,
    ) -> Result<Ciphertext> {
        self.encrypt(&self.encode(v, frac_bits)?, rng)
    }

    /// The trivial encryption of zero at `exponent` (ciphertext value 1).
    pub fn zero(&self, exponent: u32) -> Ciphertext {
        Ciphertext {
            value: BigUint::one(),
            exponent,
            key: self.id,
        }
    }

    fn check_key(&self, c: &Ciphertext) -> Result<()> {
        if c.key != self.id {
            return Err(Error::KeyMismatch);
        }
        Ok(())
    }

    /// Homomorphic addition. Exponents must already agree.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check_key(a)?;
        self.check_key(b)?;
        if a.exponent != b.exponent {
            return Err(Error::ExponentMismatch(a.exponent, b.exponent));
        }
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            exponent: a.exponent,
            key: self.id,
        })
    }

    /// Multiplies the plaintext by an already-encoded scalar. The result's
    /// exponent is the sum of both exponents.
    pub fn scalar_mul_fixed(&self, a: &Ciphertext, s: &FixedPoint) -> Result<Ciphertext> {
        self.check_key(a)?;
        if s.mantissa >= self.n {
            return Err(Error::PlaintextOutOfRange);
        }
        let value = if s.mantissa > self.half_n {
            // c^(n - k) and (c^-1)^k decrypt identically; the latter keeps the
            // exponent short.
            let inv = a
                .value
                .modinv(&self.n_squared)
                .ok_or(Error::InvalidKey("ciphertext not invertible"))?;
            inv.modpow(&(&self.n - &s.mantissa), &self.n_squared)
        } else {
            a.value.modpow(&s.mantissa, &self.n_squared)
        };
        Ok(Ciphertext {
            value,
            exponent: a.exponent + s.exponent,
            key: self.id,
        })
    }

    /// Multiplies the plaintext by the real scalar `s`; exponent grows by one.
    pub fn scalar_mul(&self, a: &Ciphertext, s: f64, frac_bits: u32) -> Result<Ciphertext> {
        let encoded = self.encode(s, frac_bits)?;
        self.scalar_mul_fixed(a, &encoded)
    }

    /// Raises the lower-exponent operand (multiplying by encoded 1) until
    /// both exponents agree.
    pub fn align(
        &self,
        a: &Ciphertext,
        b: &Ciphertext,
        frac_bits: u32,
    ) -> Result<(Ciphertext, Ciphertext)> {
        let one = self.encode(1.0, frac_bits)?;
        let mut a = a.clone();
        let mut b = b.clone();
        while a.exponent < b.exponent {
            a = self.scalar_mul_fixed(&a, &one)?;
        }
        while b.exponent < a.exponent {
            b = self.scalar_mul_fixed(&b, &one)?;
        }
        Ok((a, b))
    }

    /// Server-side averaging. Unweighted: fold of additions then multiply by
    /// `1/N`. Weighted: sum of `w_i ⊙ c_i`.
    pub fn average(
        &self,
        cts: &[Ciphertext],
        weights: Option<&[f64]>,
        frac_bits: u32,
    ) -> Result<Ciphertext> {
        let first = cts.first().ok_or(Error::EmptyAverage)?;
        match weights {
            None => {
                let mut acc = first.clone();
                for c in &cts[1..] {
                    acc = self.add(&acc, c)?;
                }
                self.scalar_mul(&acc, 1.0 / cts.len() as f64, frac_bits)
            }
            Some(w) => {
                if w.len() != cts.len() {
                    return Err(Error::InvalidWeights("length differs from ciphertext count"));
                }
                let total: f64 = w.iter().sum();
                if num_traits::Float::abs(total - 1.0) > 1e-9 {
                    return Err(Error::InvalidWeights("weights must sum to 1"));
                }
                let mut acc: Option<Ciphertext> = None;
                for (c, &wi) in cts.iter().zip(w) {
                    let term = self.scalar_mul(c, wi, frac_bits)?;
                    acc = Some(match acc {
                        None => term,
                        Some(prev) => self.add(&prev, &term)?,
                    });
                }
                Ok(acc.expect("non-empty"))
            }
        }
    }
}

impl PrivateKey {
    /// Rebuilds a private key without its factors (decryption skips CRT).
    pub fn from_parts(lambda: BigUint, mu: BigUint) -> Self {
        PrivateKey {
            lambda,
            mu,
            crt: None,
        }
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn decrypt(&self, pk: &PublicKey, c: &Ciphertext) -> Result<FixedPoint> {
        pk.check_key(c)?;
        let mantissa = match &self.crt {
            Some(crt) => crt.decrypt(&c.value),
            None => {
                let u = c.value.modpow(&self.lambda, &pk.n_squared);
                (l_function(&u, &pk.n) * &self.mu) % &pk.n
            }
        };
        Ok(FixedPoint {
            mantissa,
            exponent: c.exponent,
        })
    }

    pub fn decrypt_real(&self, pk: &PublicKey, c: &Ciphertext, frac_bits: u32) -> Result<f64> {
        Ok(pk.decode(&self.decrypt(pk, c)?, frac_bits))
    }
}

impl CrtParams {
    fn new(p: &BigUint, q: &BigUint, g: &BigUint) -> Option<Self> {
        let p_squared = p * p;
        let q_squared = q * q;
        let p_minus_1 = p - 1u32;
        let q_minus_1 = q - 1u32;
        let hp = l_function(&g.modpow(&p_minus_1, &p_squared), p).modinv(p)?;
        let hq = l_function(&g.modpow(&q_minus_1, &q_squared), q).modinv(q)?;
        let q_inv_p = q.modinv(p)?;
        Some(CrtParams {
            p: p.clone(),
            q: q.clone(),
            p_squared,
            q_squared,
            p_minus_1,
            q_minus_1,
            hp,
            hq,
            q_inv_p,
        })
    }

    fn decrypt(&self, c: &BigUint) -> BigUint {
        let mp = (l_function(&c.modpow(&self.p_minus_1, &self.p_squared), &self.p) * &self.hp)
            % &self.p;
        let mq = (l_function(&c.modpow(&self.q_minus_1, &self.q_squared), &self.q) * &self.hq)
            % &self.q;
        // m = mq + q * ((mp - mq) * q^-1 mod p)
        let mq_mod_p = &mq % &self.p;
        let diff = (&mp + &self.p - mq_mod_p) % &self.p;
        let t = (diff * &self.q_inv_p) % &self.p;
        mq + &self.q * t
    }
}

impl Keypair {
    /// Generates a keypair whose modulus has exactly `bits` bits.
    pub fn generate<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> Result<Self> {
        if bits < MIN_KEY_BITS {
            return Err(Error::KeyTooShort(bits));
        }
        let p_bits = bits / 2;
        let q_bits = bits - p_bits;
        loop {
            let p = random_prime(rng, p_bits);
            let q = random_prime(rng, q_bits);
            if p == q {
                continue;
            }
            let kp = Self::from_primes(&p, &q)?;
            debug_assert_eq!(kp.public.bits(), u64::from(bits));
            return Ok(kp);
        }
    }

    /// Builds a keypair from two given distinct primes. Intended for
    /// hand-checkable test vectors.
    pub fn from_primes(p: &BigUint, q: &BigUint) -> Result<Self> {
        if p == q {
            return Err(Error::InvalidKey("primes must be distinct"));
        }
        let n = p * q;
        let p1 = p - 1u32;
        let q1 = q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(Error::InvalidKey("gcd(n, phi(n)) must be 1"));
        }
        let public = PublicKey::from_modulus(n);
        let lambda = p1.lcm(&q1);
        let u = public.g.modpow(&lambda, &public.n_squared);
        let mu = l_function(&u, &public.n)
            .modinv(&public.n)
            .ok_or(Error::InvalidKey("L(g^lambda) not invertible mod n"))?;
        let crt = CrtParams::new(p, q, &public.g);
        Ok(Keypair {
            public,
            private: PrivateKey { lambda, mu, crt },
        })
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<FixedPoint> {
        self.private.decrypt(&self.public, c)
    }

    pub fn decrypt_real(&self, c: &Ciphertext, frac_bits: u32) -> Result<f64> {
        self.private.decrypt_real(&self.public, c, frac_bits)
    }

    pub fn decrypt_vec(&self, cts: &[Ciphertext], frac_bits: u32) -> Result<Vec<f64>> {
        cts.iter().map(|c| self.decrypt_real(c, frac_bits)).collect()
    }
}

/// Uniform integer in `[0, bound)`.
pub(crate) fn random_below<R: RngCore + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    let bits = bound.bits();
    loop {
        let candidate = random_bits(rng, bits);
        if &candidate < bound {
            return candidate;
        }
    }
}

fn random_bits<R: RngCore + ?Sized>(rng: &mut R, bits: u64) -> BigUint {
    let n_bytes = bits.div_ceil(8) as usize;
    let mut bytes = alloc::vec![0u8; n_bytes];
    rng.fill_bytes(&mut bytes);
    let excess = (n_bytes as u64) * 8 - bits;
    if excess > 0 {
        if let Some(top) = bytes.last_mut() {
            *top &= 0xff >> excess;
        }
    }
    BigUint::from_bytes_le(&bytes)
}

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// Miller-Rabin with random bases after trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in &SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let n_minus_3 = n - 3u32;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(rng, &n_minus_3) + &two;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and its two top bits set.
fn random_prime<R: RngCore + ?Sized>(rng: &mut R, bits: u32) -> BigUint {
    let bits = u64::from(bits);
    loop {
        let mut candidate = random_bits(rng, bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}
