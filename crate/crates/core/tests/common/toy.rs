//! Exact discrete latent-variable toy over rationals.

/// Exact non-negative rationals over u128.
#[derive(Clone, Copy, Debug)]
pub struct Frac(pub u128, pub u128);

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Frac {
    pub fn new(n: u128, d: u128) -> Self {
        let g = gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    pub fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    pub fn div(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1, self.1 * o.0)
    }
    pub fn eq(self, o: Frac) -> bool {
        self.0 * o.1 == o.0 * self.1
    }
    pub fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Binary latent, three binary features independent given z.
pub struct Toy {
    pub prior: [Frac; 2],
    /// `emit[z][j]` = p(x_j = 1 | z)
    pub emit: [[Frac; 3]; 2],
}

impl Toy {
    pub fn lik(&self, z: usize, x: [u8; 3], set: &[usize]) -> Frac {
        set.iter().fold(Frac(1, 1), |acc, &j| {
            let p1 = self.emit[z][j];
            let p = if x[j] == 1 { p1 } else { Frac::new(p1.1 - p1.0, p1.1) };
            acc.mul(p)
        })
    }
    pub fn posterior(&self, x: [u8; 3], set: &[usize]) -> [Frac; 2] {
        let joint = [0, 1].map(|z| self.prior[z].mul(self.lik(z, x, set)));
        let total = joint[0].add(joint[1]);
        joint.map(|j| j.div(total))
    }
    pub fn evidence(&self, x: [u8; 3], set: &[usize]) -> Frac {
        self.prior[0].mul(self.lik(0, x, set)).add(self.prior[1].mul(self.lik(1, x, set)))
    }
}

pub fn subsets(of: &[usize]) -> Vec<Vec<usize>> {
    (0..1u32 << of.len())
        .map(|bits| of.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, &j)| j).collect())
        .collect()
}

pub fn example() -> Toy {
    Toy {
        prior: [Frac::new(3, 7), Frac::new(4, 7)],
        emit: [
            [Frac::new(1, 5), Frac::new(2, 3), Frac::new(5, 9)],
            [Frac::new(7, 8), Frac::new(1, 4), Frac::new(3, 11)],
        ],
    }
}

/// Checks, for every x and every nested pair P ⊆ Q, that
/// p(z | x_Q) ∝ p(z | x_P) p(x_{Q∖P} | z) holds exactly and that the penalty
/// bracket built from exact posteriors and evidences vanishes. Returns the
/// number of cases.
pub fn check_relation(toy: &Toy) -> Result<usize, String> {
    let mut checked = 0;
    for xbits in 0..8u8 {
        let x = [xbits & 1, xbits >> 1 & 1, xbits >> 2 & 1];
        for q in subsets(&[0, 1, 2]) {
            for p in subsets(&q) {
                let pbar: Vec<usize> = q.iter().copied().filter(|j| !p.contains(j)).collect();
                let post_q = toy.posterior(x, &q);
                let post_p = toy.posterior(x, &p);
                let un = [0, 1].map(|z| post_p[z].mul(toy.lik(z, x, &pbar)));
                let norm = un[0].add(un[1]);
                for z in 0..2 {
                    if !post_q[z].eq(un[z].div(norm)) {
                        return Err(format!("x {x:?} Q {q:?} P {p:?}"));
                    }
                }
                // KL(p_Q || p_P) - E_Q log p(x_{Q∖P} | z) - log p(x_P) + log p(x_Q)
                let kl: f64 = (0..2).map(|z| post_q[z].f() * (post_q[z].f() / post_p[z].f()).ln()).sum();
                let ll: f64 = (0..2).map(|z| post_q[z].f() * toy.lik(z, x, &pbar).f().ln()).sum();
                let bracket = kl - ll - toy.evidence(x, &p).f().ln() + toy.evidence(x, &q).f().ln();
                if bracket.abs() >= 1e-12 {
                    return Err(format!("bracket {bracket} at x {x:?} Q {q:?} P {p:?}"));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}
