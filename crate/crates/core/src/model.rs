//! Particle models, the weighted metric `h`, and the two built-in models.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `(t, x) -> value`
pub type TimeStateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `(x, y) -> value`
pub type PairFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// Writes the left factors of `x` and the right factors of `x` for a
/// separable kernel `b1(x, y) = sum_r left_r(x) * right_r(y)`.
pub type FeatureFn = Arc<dyn Fn(f64, &mut [f64], &mut [f64]) + Send + Sync>;

/// Largest supported rank of a separable interaction kernel.
pub const MAX_RANK: usize = 8;

/// The interaction kernel `b1`.
///
/// A separable kernel lets the engine evaluate the empirical average
/// `(1/N) sum_k b1(x_j, x_k)` for every `j` in `O(N)` instead of `O(N^2)`.
#[derive(Clone)]
pub enum Interaction {
    Zero,
    Dense(PairFn),
    Separable { rank: usize, features: FeatureFn },
}

impl Interaction {
    pub fn separable<F>(rank: usize, features: F) -> Result<Self>
    where
        F: Fn(f64, &mut [f64], &mut [f64]) + Send + Sync + 'static,
    {
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::config(
                "interaction.rank",
                format!("rank must be in 1..={MAX_RANK}, got {rank}"),
            ));
        }
        Ok(Interaction::Separable {
            rank,
            features: Arc::new(features),
        })
    }

    pub fn dense<F>(kernel: F) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Interaction::Dense(Arc::new(kernel))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Interaction::Zero)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Interaction::Zero => 0.0,
            Interaction::Dense(k) => k(x, y),
            Interaction::Separable { rank, features } => {
                let mut lx = [0.0; MAX_RANK];
                let mut rx = [0.0; MAX_RANK];
                let mut ly = [0.0; MAX_RANK];
                let mut ry = [0.0; MAX_RANK];
                features(x, &mut lx[..*rank], &mut rx[..*rank]);
                features(y, &mut ly[..*rank], &mut ry[..*rank]);
                let mut acc = 0.0;
                for r in 0..*rank {
                    acc += lx[r] * ry[r];
                }
                acc
            }
        }
    }
}

impl fmt::Debug for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interaction::Zero => f.write_str("Zero"),
            Interaction::Dense(_) => f.write_str("Dense(..)"),
            Interaction::Separable { rank, .. } => write!(f, "Separable {{ rank: {rank} }}"),
        }
    }
}

/// The coefficients `(b0, b1, b2)` of the N-particle system, its
/// deterministic initial state, and two user-declared bounds that the
/// verifier checks on its grid.
#[derive(Clone)]
pub struct ParticleModel {
    pub name: String,
    drift: TimeStateFn,
    pub interaction: Interaction,
    diffusion: ScalarFn,
    pub x_ini: f64,
    /// Declared Lipschitz constant of `b2`.
    pub lip_b2: f64,
    /// Declared uniform bound on `|b1|`.
    pub sup_b1: f64,
}

impl ParticleModel {
    pub fn new<D, S>(name: impl Into<String>, drift: D, interaction: Interaction, diffusion: S) -> Self
    where
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            drift: Arc::new(drift),
            interaction,
            diffusion: Arc::new(diffusion),
            x_ini: 0.0,
            lip_b2: 0.0,
            sup_b1: f64::INFINITY,
        }
    }

    pub fn with_initial_state(mut self, x_ini: f64) -> Self {
        self.x_ini = x_ini;
        self
    }

    pub fn with_bounds(mut self, lip_b2: f64, sup_b1: f64) -> Self {
        self.lip_b2 = lip_b2;
        self.sup_b1 = sup_b1;
        self
    }

    #[inline]
    pub fn b0(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }

    /// `-b0`, the restoring force.
    #[inline]
    pub fn b0_hat(&self, t: f64, x: f64) -> f64 {
        -(self.drift)(t, x)
    }

    #[inline]
    pub fn b1(&self, x: f64, y: f64) -> f64 {
        self.interaction.eval(x, y)
    }

    #[inline]
    pub fn b2(&self, x: f64) -> f64 {
        (self.diffusion)(x)
    }
}

impl fmt::Debug for ParticleModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParticleModel")
            .field("name", &self.name)
            .field("interaction", &self.interaction)
            .field("x_ini", &self.x_ini)
            .field("lip_b2", &self.lip_b2)
            .field("sup_b1", &self.sup_b1)
            .finish()
    }
}

/// The core domain `D = [-A, A]`; `A = +inf` stands for the whole line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreDomain {
    pub half_width: f64,
}

impl CoreDomain {
    pub fn whole_line() -> Self {
        Self {
            half_width: f64::INFINITY,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x.abs() <= self.half_width
    }

    pub fn is_whole_line(&self) -> bool {
        self.half_width.is_infinite()
    }
}

/// `(f, g, D, a, q)` with user-supplied derivatives of `f` and `g`.
#[derive(Clone)]
pub struct MetricSpec {
    pub f: ScalarFn,
    pub f_prime: ScalarFn,
    pub f_second: ScalarFn,
    pub g: ScalarFn,
    pub g_prime: ScalarFn,
    pub g_second: ScalarFn,
    pub domain: CoreDomain,
    pub a: u32,
    pub q: u32,
}

impl fmt::Debug for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricSpec")
            .field("domain", &self.domain)
            .field("a", &self.a)
            .field("q", &self.q)
            .finish_non_exhaustive()
    }
}

fn check_exponents(a: u32, q: u32) -> Result<()> {
    if a <= 1 {
        return Err(Error::config("metric.a", format!("need a > 1, got {a}")));
    }
    if q <= 2 {
        return Err(Error::config("metric.q", format!("need q > 2, got {q}")));
    }
    Ok(())
}

impl MetricSpec {
    /// `f(z) = z^2/4` with the sigmoid weight `g` built on `D = [-A, A]`.
    pub fn quadratic_sigmoid(half_width: f64, a: u32, q: u32) -> Result<Self> {
        check_exponents(a, q)?;
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::config(
                "metric.half_width",
                format!("need 0 < A < inf, got {half_width}"),
            ));
        }
        let w = half_width;
        Ok(Self {
            f: Arc::new(|z| 0.25 * z * z),
            f_prime: Arc::new(|z| 0.5 * z),
            f_second: Arc::new(|_| 0.5),
            g: Arc::new(move |x| sigmoid_weight(x, w)),
            g_prime: Arc::new(move |x| sigmoid_weight_prime(x, w)),
            g_second: Arc::new(move |x| sigmoid_weight_second(x, w)),
            domain: CoreDomain { half_width: w },
            a,
            q,
        })
    }

    /// `f(z) = z^2/4`, `g = 1` and `D` the whole line.
    pub fn flat_quadratic(a: u32, q: u32) -> Result<Self> {
        check_exponents(a, q)?;
        Ok(Self {
            f: Arc::new(|z| 0.25 * z * z),
            f_prime: Arc::new(|z| 0.5 * z),
            f_second: Arc::new(|_| 0.5),
            g: Arc::new(|_| 1.0),
            g_prime: Arc::new(|_| 0.0),
            g_second: Arc::new(|_| 0.0),
            domain: CoreDomain::whole_line(),
            a,
            q,
        })
    }

    #[inline]
    pub fn f(&self, z: f64) -> f64 {
        (self.f)(z)
    }
    #[inline]
    pub fn f_prime(&self, z: f64) -> f64 {
        (self.f_prime)(z)
    }
    #[inline]
    pub fn f_second(&self, z: f64) -> f64 {
        (self.f_second)(z)
    }
    #[inline]
    pub fn g(&self, x: f64) -> f64 {
        (self.g)(x)
    }
    #[inline]
    pub fn g_prime(&self, x: f64) -> f64 {
        (self.g_prime)(x)
    }
    #[inline]
    pub fn g_second(&self, x: f64) -> f64 {
        (self.g_second)(x)
    }

    pub fn rate_exponent(&self) -> f64 {
        // a > 1 is enforced at construction
        rate_exponent(self.a, self.q).expect("validated exponents")
    }

    /// Exponent `2(a-1)q / (aq - a - q)` of the weight moment, or `None`
    /// when `aq <= a + q`.
    pub fn weight_moment_exponent(&self) -> Option<f64> {
        let (a, q) = (f64::from(self.a), f64::from(self.q));
        let denom = a * q - a - q;
        (denom > 0.0).then(|| 2.0 * (a - 1.0) * q / denom)
    }
}

/// `h(x, y) = g(x) g(y) f(x - y)`.
pub fn h_metric(spec: &MetricSpec, x: f64, y: f64) -> Result<f64> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Domain(format!("h_metric needs finite input, got ({x}, {y})")));
    }
    Ok(spec.g(x) * spec.g(y) * spec.f(x - y))
}

/// `a / (q (a - 1))`, the decay exponent in `N` of the coupled distance.
pub fn rate_exponent(a: u32, q: u32) -> Result<f64> {
    if a <= 1 {
        return Err(Error::Domain(format!("rate exponent needs a > 1, got {a}")));
    }
    if q < 1 {
        return Err(Error::Domain("rate exponent needs q >= 1".into()));
    }
    let a = f64::from(a);
    Ok(a / (f64::from(q) * (a - 1.0)))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[inline]
pub fn sigmoid_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (1.0 - 2.0 * s)
}

// g'(+-A) is taken from the D side (0); the one-sided limits outside differ.
fn sigmoid_weight(x: f64, a: f64) -> f64 {
    if x > a {
        sigmoid(x - a) + 0.5
    } else if x < -a {
        sigmoid(-a - x) + 0.5
    } else {
        1.0
    }
}

fn sigmoid_weight_prime(x: f64, a: f64) -> f64 {
    if x > a {
        sigmoid_prime(x - a)
    } else if x < -a {
        -sigmoid_prime(-a - x)
    } else {
        0.0
    }
}

fn sigmoid_weight_second(x: f64, a: f64) -> f64 {
    if x > a {
        sigmoid_second(x - a)
    } else if x < -a {
        sigmoid_second(-a - x)
    } else {
        0.0
    }
}

/// Synaptic weight `J(x, y)` of the neural field model.
#[derive(Clone)]
pub enum SynapticKernel {
    Constant(f64),
    /// `J(x, y) = amplitude * cos(x - y)`
    CosineDifference { amplitude: f64 },
    Custom {
        j: PairFn,
        dj_dx: PairFn,
        dj_dy: PairFn,
        sup_j: f64,
        lip_j: f64,
    },
}

impl fmt::Debug for SynapticKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynapticKernel::Constant(v) => write!(f, "Constant({v})"),
            SynapticKernel::CosineDifference { amplitude } => {
                write!(f, "CosineDifference {{ amplitude: {amplitude} }}")
            }
            SynapticKernel::Custom { sup_j, lip_j, .. } => {
                write!(f, "Custom {{ sup_j: {sup_j}, lip_j: {lip_j} }}")
            }
        }
    }
}

impl SynapticKernel {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            SynapticKernel::Constant(v) => *v,
            SynapticKernel::CosineDifference { amplitude } => amplitude * (x - y).cos(),
            SynapticKernel::Custom { j, .. } => j(x, y),
        }
    }

    pub fn partials(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            SynapticKernel::Constant(_) => (0.0, 0.0),
            SynapticKernel::CosineDifference { amplitude } => {
                let d = -amplitude * (x - y).sin();
                (d, -d)
            }
            SynapticKernel::Custom { dj_dx, dj_dy, .. } => (dj_dx(x, y), dj_dy(x, y)),
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            SynapticKernel::Constant(v) => v.abs(),
            SynapticKernel::CosineDifference { amplitude } => amplitude.abs(),
            SynapticKernel::Custom { sup_j, .. } => *sup_j,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            SynapticKernel::Constant(_) => 0.0,
            SynapticKernel::CosineDifference { amplitude } => amplitude.abs(),
            SynapticKernel::Custom { lip_j, .. } => *lip_j,
        }
    }
}

/// Deterministic input current `I(t)`.
#[derive(Clone)]
pub enum InputCurrent {
    Zero,
    Constant(f64),
    /// `offset + amplitude * sin(2 pi frequency t)`
    Sinusoid { offset: f64, amplitude: f64, frequency: f64 },
    Custom(ScalarFn),
}

impl InputCurrent {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            InputCurrent::Zero => 0.0,
            InputCurrent::Constant(c) => *c,
            InputCurrent::Sinusoid {
                offset,
                amplitude,
                frequency,
            } => offset + amplitude * (std::f64::consts::TAU * frequency * t).sin(),
            InputCurrent::Custom(i) => i(t),
        }
    }
}

impl fmt::Debug for InputCurrent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputCurrent::Zero => f.write_str("Zero"),
            InputCurrent::Constant(c) => write!(f, "Constant({c})"),
            InputCurrent::Sinusoid { offset, amplitude, frequency } => write!(
                f,
                "Sinusoid {{ offset: {offset}, amplitude: {amplitude}, frequency: {frequency} }}"
            ),
            InputCurrent::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Parameters of the rate-based neural population
/// `dV = (-V/tau + (1/N) sum_k J(V, V_k) S(V_k) + I(t)) dt + sigma dW`.
#[derive(Debug, Clone)]
pub struct NeuralFieldParams {
    pub tau: f64,
    pub sigma: f64,
    /// Half-width `A` of the core domain.
    pub half_width: f64,
    pub coupling: SynapticKernel,
    pub input: InputCurrent,
    pub x_ini: f64,
}

impl Default for NeuralFieldParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            sigma: 0.3,
            half_width: 3.0,
            coupling: SynapticKernel::CosineDifference { amplitude: 0.2 },
            input: InputCurrent::Zero,
            x_ini: 0.0,
        }
    }
}

impl NeuralFieldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("need tau > 0, got {}", self.tau)));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::config(
                "half_width",
                format!("need A > 0, got {}", self.half_width),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", format!("need sigma >= 0, got {}", self.sigma)));
        }
        if !self.x_ini.is_finite() {
            return Err(Error::config("x_ini", "must be finite"));
        }
        // Declared bounds of J, checked on the default verifier grid.
        let (sup, lip) = (self.coupling.sup(), self.coupling.lipschitz());
        let r = 5.0 * self.half_width;
        let n = 201;
        for i in 0..n {
            let x = -r + 2.0 * r * i as f64 / (n - 1) as f64;
            for k in 0..n {
                let y = -r + 2.0 * r * k as f64 / (n - 1) as f64;
                let j = self.coupling.eval(x, y);
                let (dx, dy) = self.coupling.partials(x, y);
                if !j.is_finite() || j.abs() > sup * (1.0 + 1e-12) {
                    return Err(Error::config(
                        "coupling",
                        format!("|J({x}, {y})| = {} exceeds sup_J = {sup}", j.abs()),
                    ));
                }
                if dx.abs().max(dy.abs()) > lip * (1.0 + 1e-12) {
                    return Err(Error::config(
                        "coupling",
                        format!("partial derivative of J at ({x}, {y}) exceeds lip_J = {lip}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The neural field model and its metric: `f = z^2/4`, sigmoid `g`,
/// `D = [-A, A]`, `a = 2`, `q = 3`.
pub fn build_neural_model(params: &NeuralFieldParams) -> Result<(ParticleModel, MetricSpec)> {
    params.validate()?;
    let tau = params.tau;
    let sigma = params.sigma;
    let input = params.input.clone();
    let interaction = match &params.coupling {
        SynapticKernel::Constant(j0) if *j0 == 0.0 => Interaction::Zero,
        SynapticKernel::Constant(j0) => {
            let j0 = *j0;
            Interaction::separable(1, move |x, left, right| {
                left[0] = j0;
                right[0] = sigmoid(x);
            })?
        }
        SynapticKernel::CosineDifference { amplitude } if *amplitude == 0.0 => Interaction::Zero,
        SynapticKernel::CosineDifference { amplitude } => {
            let amp = *amplitude;
            // cos(x - y) = cos x cos y + sin x sin y
            Interaction::separable(2, move |x, left, right| {
                let (s, c) = x.sin_cos();
                let sg = sigmoid(x);
                left[0] = amp * c;
                left[1] = amp * s;
                right[0] = c * sg;
                right[1] = s * sg;
            })?
        }
        SynapticKernel::Custom { j, .. } => {
            let j = j.clone();
            Interaction::dense(move |x, y| j(x, y) * sigmoid(y))
        }
    };
    let model = ParticleModel::new(
        "neural",
        move |t, x| -x / tau + input.at(t),
        interaction,
        move |_| sigma,
    )
    .with_initial_state(params.x_ini)
    .with_bounds(0.0, params.coupling.sup());
    let spec = MetricSpec::quadratic_sigmoid(params.half_width, 2, 3)?;
    Ok((model, spec))
}

/// `b0 = -x/tau`, `b1(x, y) = theta (y - x)`, `b2 = sigma`.
pub fn build_linear_model(theta: f64, tau: f64, sigma: f64) -> Result<ParticleModel> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("need tau > 0, got {tau}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config("sigma", format!("need sigma >= 0, got {sigma}")));
    }
    if !theta.is_finite() {
        return Err(Error::config("theta", "must be finite"));
    }
    let interaction = if theta == 0.0 {
        Interaction::Zero
    } else {
        Interaction::separable(2, move |x, left, right| {
            left[0] = theta;
            left[1] = -theta * x;
            right[0] = x;
            right[1] = 1.0;
        })?
    };
    let sup_b1 = if theta == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(
        ParticleModel::new("linear", move |_, x| -x / tau, interaction, move |_| sigma)
            .with_bounds(0.0, sup_b1),
    )
}
