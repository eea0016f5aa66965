/// Soft-L1 loss on squared residual norms:
/// `ρ(s) = 2c²(√(1 + s/c²) − 1)`, quadratic below `c` pixels and linear
/// beyond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftL1 {
    pub scale: f64,
}

impl SoftL1 {
    pub fn new(scale: f64) -> Self {
        Self { scale }
    }

    pub fn rho(&self, s: f64) -> f64 {
        let c2 = self.scale * self.scale;
        2.0 * c2 * ((1.0 + s / c2).sqrt() - 1.0)
    }

    /// `dρ/ds`, used as the IRLS weight.
    pub fn weight(&self, s: f64) -> f64 {
        let c2 = self.scale * self.scale;
        1.0 / (1.0 + s / c2).sqrt()
    }
}
