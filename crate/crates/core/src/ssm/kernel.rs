//! Sequential selective-scan kernels over flat row-major buffers.
//!
//! Layout: `x`, `delta`: `n × d_inner`; `b`, `c`: `n × d_state`;
//! `a`: `d_inner × d_state` (continuous, strictly negative diagonal entries).

use crate::scalar::Scalar;

/// Zero-order hold for one diagonal entry with `z = Δ·A`.
///
/// Returns `(exp(z), φ(z))` where `φ(z) = (exp(z) − 1) / z`, so that
/// `B̄ = φ(z)·Δ·B`. Below `|z| < 1e-6` φ comes from its Taylor series.
#[inline]
pub fn zoh<S: Scalar>(z: S) -> (S, S) {
    let em1 = z.exp_m1();
    let phi = if z.abs() < S::of(1e-6) {
        S::one() + z * (S::of(0.5) + z / S::of(6.0))
    } else {
        em1 / z
    };
    (em1 + S::one(), phi)
}

// 1/(j+1)!, j = 0..10
const PHI_SERIES: [f64; 11] = [
    1.0,
    0.5,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
];

// (j+1)/(j+2)!, j = 0..13
const PSI_SERIES: [f64; 14] = [
    1.0 / 2.0,
    2.0 / 6.0,
    3.0 / 24.0,
    4.0 / 120.0,
    5.0 / 720.0,
    6.0 / 5040.0,
    7.0 / 40320.0,
    8.0 / 362880.0,
    9.0 / 3628800.0,
    10.0 / 39916800.0,
    11.0 / 479001600.0,
    12.0 / 6227020800.0,
    13.0 / 87178291200.0,
    14.0 / 1307674368000.0,
];

#[inline]
fn horner<S: Scalar>(coefs: &[f64], z: S) -> S {
    coefs
        .iter()
        .rev()
        .fold(S::zero(), |acc, &c| acc * z + S::of(c))
}

/// `φ(z)` given `e = exp(z)`: series near zero, `(e − 1)/z` elsewhere.
#[inline]
pub(crate) fn phi_from<S: Scalar>(z: S, e: S) -> S {
    let series = horner(&PHI_SERIES, z);
    let direct = (e - S::one()) / z;
    if z.abs() < S::of(0.1) {
        series
    } else {
        direct
    }
}

/// `ψ(z) = φ′(z) = (z·eᶻ − eᶻ + 1) / z²` given `e = exp(z)`; the
/// `A`-derivative factor of `B̄`.
#[inline]
pub(crate) fn psi_from<S: Scalar>(z: S, e: S) -> S {
    let series = horner(&PSI_SERIES, z);
    let direct = (z * e - e + S::one()) / (z * z);
    if z.abs() < S::of(0.5) {
        series
    } else {
        direct
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanDims {
    pub tokens: usize,
    pub inner: usize,
    pub state: usize,
}

/// Values retained by a recorded forward scan for the adjoint pass.
#[derive(Debug, Clone, Default)]
pub struct ScanCache<S> {
    /// Hidden state after each token, indexed by token position.
    h: Vec<S>,
    abar: Vec<S>,
    /// `Δ·φ(ΔA)` so that `B̄ = coef·B`.
    coef: Vec<S>,
}

/// Runs `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t` with `h = 0` before the
/// first processed token. With `reverse` the tokens are visited from last to
/// first and outputs are written back at their original positions.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<S: Scalar>(
    x: &[S],
    delta: &[S],
    b: &[S],
    c: &[S],
    a: &[S],
    dims: ScanDims,
    reverse: bool,
    record: bool,
) -> (Vec<S>, Option<ScanCache<S>>) {
    let ScanDims {
        tokens,
        inner,
        state,
    } = dims;
    let width = inner * state;
    let mut y = vec![S::zero(); tokens * inner];
    let mut h = vec![S::zero(); width];
    let mut z = vec![S::zero(); width];
    let mut abar = vec![S::zero(); width];
    let mut coef = vec![S::zero(); width];
    let mut cache = record.then(|| ScanCache {
        h: vec![S::zero(); tokens * width],
        abar: vec![S::zero(); tokens * width],
        coef: vec![S::zero(); tokens * width],
    });

    for k in 0..tokens {
        let t = if reverse { tokens - 1 - k } else { k };
        let brow = &b[t * state..(t + 1) * state];
        let crow = &c[t * state..(t + 1) * state];
        let drow = &delta[t * inner..(t + 1) * inner];
        let xrow = &x[t * inner..(t + 1) * inner];

        for ((zc, ac), &dt) in z.chunks_exact_mut(state).zip(a.chunks_exact(state)).zip(drow) {
            for (zv, &av) in zc.iter_mut().zip(ac) {
                *zv = dt * av;
            }
        }
        for (e, &zv) in abar.iter_mut().zip(&z) {
            *e = zv.fast_exp();
        }
        for (((cc, zc), ec), &dt) in coef
            .chunks_exact_mut(state)
            .zip(z.chunks_exact(state))
            .zip(abar.chunks_exact(state))
            .zip(drow)
        {
            for ((cv, &zv), &ev) in cc.iter_mut().zip(zc).zip(ec) {
                *cv = dt * phi_from(zv, ev);
            }
        }
        for (d, ((hc, ec), cc)) in h
            .chunks_exact_mut(state)
            .zip(abar.chunks_exact(state))
            .zip(coef.chunks_exact(state))
            .enumerate()
        {
            let xv = xrow[d];
            let mut acc = S::zero();
            for ((((hv, &ev), &cv), &bv), &cr) in hc.iter_mut().zip(ec).zip(cc).zip(brow).zip(crow) {
                *hv = ev * *hv + cv * bv * xv;
                acc += cr * *hv;
            }
            y[t * inner + d] = acc;
        }
        if let Some(cache) = cache.as_mut() {
            let span = t * width..(t + 1) * width;
            cache.h[span.clone()].copy_from_slice(&h);
            cache.abar[span.clone()].copy_from_slice(&abar);
            cache.coef[span].copy_from_slice(&coef);
        }
    }
    (y, cache)
}

/// Gradients of a scan with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct ScanGrads<S> {
    pub x: Vec<S>,
    pub delta: Vec<S>,
    pub b: Vec<S>,
    pub c: Vec<S>,
    /// With respect to the continuous `A` entries (not `a_log`).
    pub a: Vec<S>,
}

/// Reverse-mode adjoint of [`scan_forward`] given `gy = ∂L/∂y`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<S: Scalar>(
    x: &[S],
    delta: &[S],
    b: &[S],
    c: &[S],
    a: &[S],
    dims: ScanDims,
    reverse: bool,
    cache: &ScanCache<S>,
    gy: &[S],
) -> ScanGrads<S> {
    let ScanDims {
        tokens,
        inner,
        state,
    } = dims;
    let mut g = ScanGrads {
        x: vec![S::zero(); tokens * inner],
        delta: vec![S::zero(); tokens * inner],
        b: vec![S::zero(); tokens * state],
        c: vec![S::zero(); tokens * state],
        a: vec![S::zero(); inner * state],
    };
    let width = inner * state;
    // adjoint of h_k flowing back from step k+1, already multiplied by Ā_{k+1}
    let mut carry = vec![S::zero(); width];
    let zeros = vec![S::zero(); width];
    // per-cell scratch, flat over (d, n)
    let mut gh = vec![S::zero(); width];
    let mut dt_e = vec![S::zero(); width];
    let mut xb_e = vec![S::zero(); width];
    let mut g_bbar = vec![S::zero(); width];

    for k in (0..tokens).rev() {
        let t = if reverse { tokens - 1 - k } else { k };
        let h_prev = match k {
            0 => &zeros[..],
            _ => {
                let p = if reverse { t + 1 } else { t - 1 };
                &cache.h[p * width..(p + 1) * width]
            }
        };
        let span = t * width..(t + 1) * width;
        let h_now = &cache.h[span.clone()];
        let abar = &cache.abar[span.clone()];
        let coef = &cache.coef[span];
        let brow = &b[t * state..(t + 1) * state];
        let crow = &c[t * state..(t + 1) * state];
        let row = t * inner..(t + 1) * inner;
        let (gy_row, dt_row, x_row) = (&gy[row.clone()], &delta[row.clone()], &x[row]);

        let gc = &mut g.c[t * state..(t + 1) * state];
        for (d, ((((ghc, cc), dc), xc), hc)) in gh
            .chunks_exact_mut(state)
            .zip(carry.chunks_exact(state))
            .zip(dt_e.chunks_exact_mut(state))
            .zip(xb_e.chunks_exact_mut(state))
            .zip(h_now.chunks_exact(state))
            .enumerate()
        {
            let (gyv, dt, xv) = (gy_row[d], dt_row[d], x_row[d]);
            for ((((g, &cr), de), xe), (&cn, &bn)) in ghc
                .iter_mut()
                .zip(cc)
                .zip(dc.iter_mut())
                .zip(xc.iter_mut())
                .zip(crow.iter().zip(brow))
            {
                *g = gyv * cn + cr;
                *de = dt;
                *xe = xv * bn;
            }
            for (acc, &hn) in gc.iter_mut().zip(hc) {
                *acc += gyv * hn;
            }
        }
        // ∂L/∂B̄·x, then the dA, carry updates: all elementwise
        for ((gb, &g), &xe) in g_bbar.iter_mut().zip(&gh).zip(&xb_e) {
            *gb = g * xe;
        }
        for ((((((ga, cr), &g), &hp), &ab), &de), (&av, &gb)) in g
            .a
            .iter_mut()
            .zip(carry.iter_mut())
            .zip(&gh)
            .zip(h_prev)
            .zip(abar)
            .zip(&dt_e)
            .zip(a.iter().zip(&g_bbar))
        {
            // dĀ/dA = ΔĀ, dB̄/dA = B Δ² ψ(ΔA)
            *ga += g * hp * de * ab + gb * de * de * psi_from(de * av, ab);
            *cr = g * ab;
        }
        let gb_row = &mut g.b[t * state..(t + 1) * state];
        for (d, ((((ghc, hp), ab), cf), ac)) in gh
            .chunks_exact(state)
            .zip(h_prev.chunks_exact(state))
            .zip(abar.chunks_exact(state))
            .zip(coef.chunks_exact(state))
            .zip(a.chunks_exact(state))
            .enumerate()
        {
            let xv = x_row[d];
            let mut gx = S::zero();
            let mut gdt = S::zero();
            for (((((&g, &hp), &ab), &cf), &av), (&bn, gbn)) in ghc
                .iter()
                .zip(hp)
                .zip(ab)
                .zip(cf)
                .zip(ac)
                .zip(brow.iter().zip(gb_row.iter_mut()))
            {
                gx += g * cf * bn;
                *gbn += g * xv * cf;
                // dĀ/dΔ = AĀ, dB̄/dΔ = BĀ
                gdt += g * (hp * av + xv * bn) * ab;
            }
            g.x[t * inner + d] += gx;
            g.delta[t * inner + d] += gdt;
        }
    }
    g
}
