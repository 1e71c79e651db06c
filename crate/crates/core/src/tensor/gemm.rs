//! Blocked dense matrix product.
//!
//! Every output element is accumulated in a fixed order that depends only on
//! the compile-time blocking constants: within a `KC` slab the products are
//! summed in increasing `k`, and slabs are added to the output in increasing
//! order. Vectorization only runs across independent output columns and the
//! kernel never fuses multiply and add, so the AVX-512, AVX2 and portable
//! paths produce bit-identical results.

// Only KC influences the summation order. The register tile (MR × NR) may
// differ per instruction set without changing any result bit.
const KC: usize = 256;
const MC: usize = 128;
const AMR: usize = 4;
const ANR: usize = 24;

/// Strided read-only view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View<'_> {
    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// `out = a · b` where `a` is `m×k`, `b` is `k×n` and `out` is a contiguous
/// row-major `m×n` buffer.
pub(crate) fn gemm(m: usize, n: usize, k: usize, a: View<'_>, b: View<'_>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            unsafe { gemm_avx512(m, n, k, a, b, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(m, n, k, a, b, out) };
            return;
        }
    }
    gemm_portable(m, n, k, a, b, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
pub(crate) unsafe fn gemm_avx512(m: usize, n: usize, k: usize, a: View<'_>, b: View<'_>, out: &mut [f64]) {
    gemm_body::<AMR, ANR>(m, n, k, a, b, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
pub(crate) unsafe fn gemm_avx2(m: usize, n: usize, k: usize, a: View<'_>, b: View<'_>, out: &mut [f64]) {
    gemm_body::<6, 8>(m, n, k, a, b, out);
}

pub(crate) fn gemm_portable(m: usize, n: usize, k: usize, a: View<'_>, b: View<'_>, out: &mut [f64]) {
    gemm_body::<4, 4>(m, n, k, a, b, out);
}

#[inline(always)]
fn gemm_body<const MR: usize, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: View<'_>,
    b: View<'_>,
    out: &mut [f64],
) {
    out.fill(0.0);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let n_panels = n.div_ceil(NR);
    let mut bpack = vec![0.0; n_panels * KC * NR];
    let mut apack = vec![0.0; MC.div_ceil(MR) * KC * MR];

    for pc in (0..k).step_by(KC) {
        let kc = KC.min(k - pc);
        pack_b::<NR>(&mut bpack, b, pc, kc, n);
        for ic in (0..m).step_by(MC) {
            let mc = MC.min(m - ic);
            pack_a::<MR>(&mut apack, a, ic, mc, pc, kc);
            for jp in 0..n_panels {
                let bp = &bpack[jp * kc * NR..(jp + 1) * kc * NR];
                let j0 = jp * NR;
                let nr = NR.min(n - j0);
                for ip in 0..mc.div_ceil(MR) {
                    let ap = &apack[ip * kc * MR..(ip + 1) * kc * MR];
                    let acc = micro_kernel::<MR, NR>(ap, bp);
                    let i0 = ic + ip * MR;
                    let mr = MR.min(m - i0);
                    for (ii, acc_row) in acc.iter().enumerate().take(mr) {
                        let row = &mut out[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + nr];
                        for (o, v) in row.iter_mut().zip(acc_row.iter()) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel<const MR: usize, const NR: usize>(ap: &[f64], bp: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0; NR]; MR];
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for i in 0..MR {
            let ai = av[i];
            for j in 0..NR {
                acc[i][j] += ai * bv[j];
            }
        }
    }
    acc
}

// Panel layout: for each NR-wide column panel, kc rows of NR values.
#[inline(always)]
fn pack_b<const NR: usize>(buf: &mut [f64], b: View<'_>, pc: usize, kc: usize, n: usize) {
    for jp in 0..n.div_ceil(NR) {
        let j0 = jp * NR;
        let panel = &mut buf[jp * kc * NR..(jp + 1) * kc * NR];
        for kk in 0..kc {
            let dst = &mut panel[kk * NR..(kk + 1) * NR];
            for (jj, d) in dst.iter_mut().enumerate() {
                let j = j0 + jj;
                *d = if j < n { b.at(pc + kk, j) } else { 0.0 };
            }
        }
    }
}

#[inline(always)]
fn pack_a<const MR: usize>(buf: &mut [f64], a: View<'_>, ic: usize, mc: usize, pc: usize, kc: usize) {
    for ip in 0..mc.div_ceil(MR) {
        let i0 = ip * MR;
        let panel = &mut buf[ip * kc * MR..(ip + 1) * kc * MR];
        for kk in 0..kc {
            let dst = &mut panel[kk * MR..(kk + 1) * MR];
            for (ii, d) in dst.iter_mut().enumerate() {
                let i = i0 + ii;
                *d = if i < mc { a.at(ic + i, pc + kk) } else { 0.0 };
            }
        }
    }
}
