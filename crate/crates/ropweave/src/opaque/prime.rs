//! Primality testing and prime sampling for predicate constants.
//!
//! Miller-Rabin with the fixed witness set {2, 3, 5, 7, 11, 13, 17, 19, 23,
//! 29, 31, 37} is a deterministic primality test for every n < 2^64, which
//! covers both constant ranges used by the factorization predicates.

use crate::rng::Rng;

const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn pow_mod(base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc: u128 = 1;
    let mut b = base as u128 % m as u128;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m as u128;
        }
        b = b * b % m as u128;
        exp >>= 1;
    }
    acc as u64
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in WITNESSES {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let trailing = (n - 1).trailing_zeros();
    let odd = (n - 1) >> trailing;
    'witness: for a in WITNESSES {
        let mut x = pow_mod(a, odd, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..trailing {
            x = ((x as u128 * x as u128) % n as u128) as u64;
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Uniformly samples a prime from `[lo, hi)` by rejection.
pub fn random_prime(rng: &mut Rng, lo: u64, hi: u64) -> u64 {
    assert!(hi > lo + 1, "empty prime range");
    loop {
        let c = lo + rng.below(hi - lo) | 1;
        if c < hi && is_prime(c) {
            return c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_small_numbers() {
        let primes: Vec<u64> = (0..60).filter(|&n| is_prime(n)).collect();
        assert_eq!(
            primes,
            [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59]
        );
    }

    #[test]
    fn rejects_carmichael_and_square() {
        assert!(!is_prime(561));
        assert!(!is_prime(1024));
        assert!(!is_prime(3_215_031_751)); // strong pseudoprime to bases 2,3,5,7
    }

    #[test]
    fn accepts_large_known_primes() {
        assert!(is_prime((1 << 61) - 1)); // Mersenne prime M61
        assert!(is_prime(4_611_686_018_427_388_039)); // first prime above 2^62
        assert!(!is_prime((1 << 62) + 1));
    }

    #[test]
    fn sampled_primes_stay_in_range() {
        let mut rng = Rng::seeded(7);
        for _ in 0..50 {
            let p = random_prime(&mut rng, 1 << 62, 1 << 63);
            assert!(p >= 1 << 62 && p < 1 << 63);
            assert!(is_prime(p));
        }
        for _ in 0..50 {
            let p = random_prime(&mut rng, 1 << 8, 1 << 16);
            assert!(p >= 1 << 8 && p < 1 << 16);
            assert!(is_prime(p));
        }
    }
}
