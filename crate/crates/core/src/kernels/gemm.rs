//! Row-major matrix multiply: `f32` and `i8 x i8 -> i32`.
//!
//! Both paths pack A into `MR`-row panels and B into `NR`-column panels and
//! run a register-tiled microkernel over each `MR x NR` output tile. On x86_64
//! the microkernels use AVX2/FMA (f32) and AVX-VNNI or AVX2 `vpmaddwd` (int8),
//! picked at runtime; everywhere else a scalar tile loop runs.
//!
//! The int8 path packs operands as adjacent-k `i16` pairs so one multiply-add
//! instruction covers two reduction steps. Accumulation is exact in `i32` for
//! `k < 2^17` with operands in `[-127, 127]`.

use std::sync::OnceLock;

pub const MR: usize = 6;
pub const NR: usize = 16;

type Tile<T> = [[T; NR]; MR];

type MicroF32 = fn(usize, &[f32], &[f32], &mut Tile<f32>);
type MicroI8 = fn(usize, &[i32], &[i16], &mut Tile<i32>);

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a: m×k`, `b: k×n`.
pub fn sgemm(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    assert_eq!(a.len(), m * k, "sgemm: A is not {m}x{k}");
    assert_eq!(b.len(), k * n, "sgemm: B is not {k}x{n}");
    assert_eq!(c.len(), m * n, "sgemm: C is not {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let micro = micro_f32();
    let a_panels = m.div_ceil(MR);
    let mut a_pack = vec![0.0f32; a_panels * k * MR];
    for ip in 0..a_panels {
        let panel = &mut a_pack[ip * k * MR..(ip + 1) * k * MR];
        for r in 0..MR.min(m - ip * MR) {
            let row = &a[(ip * MR + r) * k..(ip * MR + r + 1) * k];
            for (p, &v) in row.iter().enumerate() {
                panel[p * MR + r] = v;
            }
        }
    }
    let mut b_pack = vec![0.0f32; k * NR];
    let mut tile = [[0.0f32; NR]; MR];
    for j0 in (0..n).step_by(NR) {
        let cols = NR.min(n - j0);
        if cols < NR {
            b_pack.fill(0.0);
        }
        for p in 0..k {
            b_pack[p * NR..p * NR + cols].copy_from_slice(&b[p * n + j0..p * n + j0 + cols]);
        }
        for ip in 0..a_panels {
            micro(k, &a_pack[ip * k * MR..(ip + 1) * k * MR], &b_pack, &mut tile);
            let rows = MR.min(m - ip * MR);
            for (r, trow) in tile.iter().enumerate().take(rows) {
                let crow = &mut c[(ip * MR + r) * n + j0..(ip * MR + r) * n + j0 + cols];
                if accumulate {
                    for (cv, tv) in crow.iter_mut().zip(trow) {
                        *cv += tv;
                    }
                } else {
                    crow.copy_from_slice(&trow[..cols]);
                }
            }
        }
    }
}

/// `c = a · b` over int8 operands with exact `i32` accumulation.
pub fn igemm(m: usize, n: usize, k: usize, a: &[i8], b: &[i8], c: &mut [i32]) {
    assert_eq!(a.len(), m * k, "igemm: A is not {m}x{k}");
    assert_eq!(b.len(), k * n, "igemm: B is not {k}x{n}");
    assert_eq!(c.len(), m * n, "igemm: C is not {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0);
        return;
    }
    let micro = micro_i8();
    let kp = k.div_ceil(2);
    let a_panels = m.div_ceil(MR);
    // A panel: for each k-pair, MR words each holding (a[r][2p], a[r][2p+1]) as i16 lanes.
    let mut a_pack = vec![0i32; a_panels * kp * MR];
    for ip in 0..a_panels {
        let panel = &mut a_pack[ip * kp * MR..(ip + 1) * kp * MR];
        for r in 0..MR.min(m - ip * MR) {
            let row = &a[(ip * MR + r) * k..(ip * MR + r + 1) * k];
            for p in 0..kp {
                let lo = row[2 * p] as i16;
                let hi = row.get(2 * p + 1).map_or(0, |&v| v as i16);
                panel[p * MR + r] = pack_pair(lo, hi);
            }
        }
    }
    // B panel: [kp][NR][2] i16.
    let mut b_pack = vec![0i16; kp * NR * 2];
    let mut tile = [[0i32; NR]; MR];
    for j0 in (0..n).step_by(NR) {
        let cols = NR.min(n - j0);
        b_pack.fill(0);
        for p in 0..kp {
            let dst = &mut b_pack[p * NR * 2..(p + 1) * NR * 2];
            let r0 = &b[2 * p * n + j0..2 * p * n + j0 + cols];
            for (j, &v) in r0.iter().enumerate() {
                dst[2 * j] = v as i16;
            }
            if 2 * p + 1 < k {
                let r1 = &b[(2 * p + 1) * n + j0..(2 * p + 1) * n + j0 + cols];
                for (j, &v) in r1.iter().enumerate() {
                    dst[2 * j + 1] = v as i16;
                }
            }
        }
        for ip in 0..a_panels {
            micro(kp, &a_pack[ip * kp * MR..(ip + 1) * kp * MR], &b_pack, &mut tile);
            let rows = MR.min(m - ip * MR);
            for (r, trow) in tile.iter().enumerate().take(rows) {
                c[(ip * MR + r) * n + j0..(ip * MR + r) * n + j0 + cols].copy_from_slice(&trow[..cols]);
            }
        }
    }
}

/// Row-major transpose of a `rows x cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f32]) -> Vec<f32> {
    assert_eq!(src.len(), rows * cols);
    let mut dst = vec![0.0f32; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
    dst
}

fn pack_pair(lo: i16, hi: i16) -> i32 {
    ((lo as u16 as u32) | ((hi as u16 as u32) << 16)) as i32
}

fn unpack_pair(w: i32) -> (i32, i32) {
    let lo = (w as u32 & 0xFFFF) as u16 as i16 as i32;
    let hi = ((w as u32) >> 16) as u16 as i16 as i32;
    (lo, hi)
}

/// Which microkernels this process dispatches to; reported by benchmarks.
pub fn kernel_isa() -> (&'static str, &'static str) {
    (*F32_ISA.get_or_init(|| select_f32().0), *I8_ISA.get_or_init(|| select_i8().0))
}

static F32_ISA: OnceLock<&'static str> = OnceLock::new();
static I8_ISA: OnceLock<&'static str> = OnceLock::new();

fn micro_f32() -> MicroF32 {
    static K: OnceLock<MicroF32> = OnceLock::new();
    *K.get_or_init(|| select_f32().1)
}

fn micro_i8() -> MicroI8 {
    static K: OnceLock<MicroI8> = OnceLock::new();
    *K.get_or_init(|| select_i8().1)
}

fn select_f32() -> (&'static str, MicroF32) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            return ("avx2+fma", x86::micro_f32_avx2);
        }
    }
    ("scalar", micro_f32_scalar)
}

fn select_i8() -> (&'static str, MicroI8) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("avxvnni") {
            return ("avx-vnni", x86::micro_i8_vnni);
        }
        if std::is_x86_feature_detected!("avx2") {
            return ("avx2", x86::micro_i8_avx2);
        }
    }
    ("scalar", micro_i8_scalar)
}

fn micro_f32_scalar(k: usize, a: &[f32], b: &[f32], out: &mut Tile<f32>) {
    let mut acc = [[0.0f32; NR]; MR];
    for (ap, bp) in a.chunks_exact(MR).zip(b.chunks_exact(NR)).take(k) {
        for (row, &av) in acc.iter_mut().zip(ap) {
            for (c, &bv) in row.iter_mut().zip(bp) {
                *c += av * bv;
            }
        }
    }
    *out = acc;
}

fn micro_i8_scalar(kp: usize, a: &[i32], b: &[i16], out: &mut Tile<i32>) {
    let mut acc = [[0i32; NR]; MR];
    for (ap, bp) in a.chunks_exact(MR).zip(b.chunks_exact(2 * NR)).take(kp) {
        for (row, &aw) in acc.iter_mut().zip(ap) {
            let (a0, a1) = unpack_pair(aw);
            for (j, c) in row.iter_mut().enumerate() {
                *c += a0 * bp[2 * j] as i32 + a1 * bp[2 * j + 1] as i32;
            }
        }
    }
    *out = acc;
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{Tile, MR, NR};
    use std::arch::x86_64::*;

    pub(super) fn micro_f32_avx2(k: usize, a: &[f32], b: &[f32], out: &mut Tile<f32>) {
        assert!(a.len() >= k * MR && b.len() >= k * NR);
        // SAFETY: selected only after runtime detection of avx2 and fma; the
        // length assertion above bounds every load.
        unsafe { f32_avx2(k, a.as_ptr(), b.as_ptr(), out) }
    }

    pub(super) fn micro_i8_vnni(kp: usize, a: &[i32], b: &[i16], out: &mut Tile<i32>) {
        assert!(a.len() >= kp * MR && b.len() >= kp * NR * 2);
        // SAFETY: selected only after runtime detection of avx2 and avxvnni.
        unsafe { i8_vnni(kp, a.as_ptr(), b.as_ptr(), out) }
    }

    pub(super) fn micro_i8_avx2(kp: usize, a: &[i32], b: &[i16], out: &mut Tile<i32>) {
        assert!(a.len() >= kp * MR && b.len() >= kp * NR * 2);
        // SAFETY: selected only after runtime detection of avx2.
        unsafe { i8_avx2(kp, a.as_ptr(), b.as_ptr(), out) }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn f32_avx2(k: usize, a: *const f32, b: *const f32, out: &mut Tile<f32>) {
        let mut c = [[_mm256_setzero_ps(); 2]; MR];
        for p in 0..k {
            let b0 = _mm256_loadu_ps(b.add(p * NR));
            let b1 = _mm256_loadu_ps(b.add(p * NR + 8));
            for (r, acc) in c.iter_mut().enumerate() {
                let av = _mm256_broadcast_ss(&*a.add(p * MR + r));
                acc[0] = _mm256_fmadd_ps(av, b0, acc[0]);
                acc[1] = _mm256_fmadd_ps(av, b1, acc[1]);
            }
        }
        for (row, acc) in out.iter_mut().zip(c) {
            _mm256_storeu_ps(row.as_mut_ptr(), acc[0]);
            _mm256_storeu_ps(row.as_mut_ptr().add(8), acc[1]);
        }
    }

    #[target_feature(enable = "avx2,avxvnni")]
    unsafe fn i8_vnni(kp: usize, a: *const i32, b: *const i16, out: &mut Tile<i32>) {
        let mut c = [[_mm256_setzero_si256(); 2]; MR];
        for p in 0..kp {
            let b0 = _mm256_loadu_si256(b.add(p * 2 * NR) as *const __m256i);
            let b1 = _mm256_loadu_si256(b.add(p * 2 * NR + 16) as *const __m256i);
            for (r, acc) in c.iter_mut().enumerate() {
                let av = _mm256_set1_epi32(*a.add(p * MR + r));
                acc[0] = _mm256_dpwssd_avx_epi32(acc[0], av, b0);
                acc[1] = _mm256_dpwssd_avx_epi32(acc[1], av, b1);
            }
        }
        for (row, acc) in out.iter_mut().zip(c) {
            _mm256_storeu_si256(row.as_mut_ptr() as *mut __m256i, acc[0]);
            _mm256_storeu_si256(row.as_mut_ptr().add(8) as *mut __m256i, acc[1]);
        }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn i8_avx2(kp: usize, a: *const i32, b: *const i16, out: &mut Tile<i32>) {
        let mut c = [[_mm256_setzero_si256(); 2]; MR];
        for p in 0..kp {
            let b0 = _mm256_loadu_si256(b.add(p * 2 * NR) as *const __m256i);
            let b1 = _mm256_loadu_si256(b.add(p * 2 * NR + 16) as *const __m256i);
            for (r, acc) in c.iter_mut().enumerate() {
                let av = _mm256_set1_epi32(*a.add(p * MR + r));
                acc[0] = _mm256_add_epi32(acc[0], _mm256_madd_epi16(av, b0));
                acc[1] = _mm256_add_epi32(acc[1], _mm256_madd_epi16(av, b1));
            }
        }
        for (row, acc) in out.iter_mut().zip(c) {
            _mm256_storeu_si256(row.as_mut_ptr() as *mut __m256i, acc[0]);
            _mm256_storeu_si256(row.as_mut_ptr().add(8) as *mut __m256i, acc[1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_f32(m: usize, n: usize, k: usize, a: &[f32], b: &[f32]) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c
    }

    #[test]
    fn sgemm_matches_naive_on_ragged_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n, k) in &[(1, 1, 1), (5, 17, 3), (13, 33, 29), (6, 16, 64), (7, 1, 100)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![f32::NAN; m * n];
            sgemm(m, n, k, &a, &b, &mut c, false);
            let want = naive_f32(m, n, k, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((*x as f64 - y).abs() < 1e-5, "{m}x{n}x{k}: {x} vs {y}");
            }
            let before = c.clone();
            sgemm(m, n, k, &a, &b, &mut c, true);
            for (x, y) in c.iter().zip(&before) {
                assert!((x - 2.0 * y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn igemm_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n, k) in &[(1, 1, 1), (7, 19, 5), (12, 32, 300), (3, 40, 2)] {
            let a: Vec<i8> = (0..m * k).map(|_| rng.random_range(-127..=127)).collect();
            let b: Vec<i8> = (0..k * n).map(|_| rng.random_range(-127..=127)).collect();
            let mut c = vec![0i32; m * n];
            igemm(m, n, k, &a, &b, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let want: i32 = (0..k).map(|p| a[i * k + p] as i32 * b[p * n + j] as i32).sum();
                    assert_eq!(c[i * n + j], want, "{m}x{n}x{k} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn scalar_microkernels_agree_with_dispatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 37;
        let a: Vec<i32> =
            (0..k * MR).map(|_| pack_pair(rng.random_range(-127..=127), rng.random_range(-127..=127))).collect();
        let b: Vec<i16> = (0..k * NR * 2).map(|_| rng.random_range(-127..=127)).collect();
        let mut t1 = [[0i32; NR]; MR];
        let mut t2 = [[0i32; NR]; MR];
        micro_i8_scalar(k, &a, &b, &mut t1);
        micro_i8()(k, &a, &b, &mut t2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn pair_packing_roundtrips_signs() {
        for &(lo, hi) in &[(0i16, 0i16), (-127, 127), (127, -127), (-1, -1)] {
            assert_eq!(unpack_pair(pack_pair(lo, hi)), (lo as i32, hi as i32));
        }
    }
}
