use crate::datagen::{Component, MixtureSpec};

/// Ground-truth labeler for the 2-D mixture.
#[derive(Clone, Debug)]
pub struct Oracle {
    components: Vec<(Component, [[f64; 2]; 2])>,
}

fn inverse(c: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]]
}

impl Oracle {
    pub fn new(mixture: &MixtureSpec, num_styles: usize, num_categories: usize) -> Self {
        Oracle {
            components: mixture
                .components(num_styles, num_categories)
                .into_iter()
                .map(|c| {
                    let inv = inverse(&c.cov);
                    (c, inv)
                })
                .collect(),
        }
    }

    pub fn mahalanobis_sq(&self, index: usize, p: [f64; 2]) -> f64 {
        let (c, inv) = &self.components[index];
        let d = [p[0] - c.mean[0], p[1] - c.mean[1]];
        d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1])
    }

    /// `(style, category)` of the Mahalanobis-nearest component.
    pub fn classify(&self, p: [f64; 2]) -> (usize, usize) {
        let best = (0..self.components.len())
            .min_by(|&a, &b| self.mahalanobis_sq(a, p).total_cmp(&self.mahalanobis_sq(b, p)))
            .expect("mixture has components");
        let c = &self.components[best].0;
        (c.style, c.category)
    }

    pub fn components(&self) -> impl Iterator<Item = &Component> {
        self.components.iter().map(|(c, _)| c)
    }
}

pub fn oracle_classify(p: [f64; 2], mixture: &MixtureSpec, num_styles: usize, num_categories: usize) -> (usize, usize) {
    Oracle::new(mixture, num_styles, num_categories).classify(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn log_density(c: &Component, p: [f64; 2]) -> f64 {
        let cov = c.cov;
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let (a, b, d) = (cov[0][0], cov[0][1], cov[1][1]);
        let (x, y) = (p[0] - c.mean[0], p[1] - c.mean[1]);
        let quad = (d * x * x - 2.0 * b * x * y + a * y * y) / det;
        -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn means_map_to_their_own_labels() {
        let m = MixtureSpec::default();
        let o = Oracle::new(&m, 3, 4);
        for c in o.components() {
            assert_eq!(o.classify(c.mean), (c.style, c.category));
        }
        let far = o.classify([1e6, -3e5]);
        assert!(far.0 < 3 && far.1 < 4);
    }

    #[test]
    fn agrees_with_brute_force_likelihood() {
        let m = MixtureSpec::default();
        let o = Oracle::new(&m, 3, 4);
        let comps = m.components(3, 4);
        let mut r = rng::stream(12, 0);
        for _ in 0..1000 {
            let p = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let best = comps
                .iter()
                .max_by(|a, b| log_density(a, p).total_cmp(&log_density(b, p)))
                .unwrap();
            assert_eq!(o.classify(p), (best.style, best.category));
        }
    }

    #[test]
    fn samples_are_mostly_classified_correctly() {
        let m = MixtureSpec::default();
        let o = Oracle::new(&m, 3, 4);
        let mut r = rng::stream(13, 0);
        let mut hits = 0;
        let mut total = 0;
        for c in m.components(3, 4) {
            for _ in 0..200 {
                total += 1;
                if o.classify(c.sample(&mut r)) == (c.style, c.category) {
                    hits += 1;
                }
            }
        }
        assert!(hits as f64 / total as f64 > 0.95, "{hits}/{total}");
    }
}
