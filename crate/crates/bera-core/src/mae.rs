//! MAE-lite reconstructor with a from-scratch gradient engine.
//!
//! A small masked autoencoder: linear patch embedding + learned positions,
//! one single-head self-attention block over visible patches (encoder), mask
//! tokens + a projection of the frozen global embedding on the decoder side,
//! one more attention block, and a linear head back to pixels. The layer set
//! is deliberately tiny so reverse-mode gradients can be written by hand and
//! checked against central finite differences.
//!
//! Layouts: all matrices are row-major `[in][out]`; images are H x W x 3.

use crate::btf::{Archive, Payload};
use crate::error::{BeraError, Result};
use crate::par;
use crate::rng::RandomStream;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// patch plumbing

#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub p: usize,
    pub rows: usize,
    pub cols: usize,
    /// (rows*cols) x (P*P*3), row-major patch order.
    pub patches: Tensor,
}

pub fn patchify(image: &Tensor, p: usize) -> Result<PatchGrid> {
    if image.ndim() != 3 || image.shape()[2] != 3 {
        return Err(BeraError::ShapeMismatch(format!(
            "image must be H x W x 3, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(BeraError::IndivisibleDimensions { h, w, p });
    }
    let (rows, cols) = (h / p, w / p);
    let pd = p * p * 3;
    let mut out = vec![0.0; rows * cols * pd];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * pd;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        out[base + (py * p + px) * 3 + ch] =
                            image.at3(r * p + py, c * p + px, ch);
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        p,
        rows,
        cols,
        patches: Tensor::new(vec![rows * cols, pd], out)?,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Tensor {
    let (p, rows, cols) = (grid.p, grid.rows, grid.cols);
    let mut img = Tensor::zeros(vec![rows * p, cols * p, 3]);
    for r in 0..rows {
        for c in 0..cols {
            let patch = grid.patches.row(r * cols + c);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        img.set3(r * p + py, c * p + px, ch, patch[(py * p + px) * 3 + ch]);
                    }
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// masks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOrigin {
    RandomTraining,
    BackdoorSelective,
}

#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
    pub origin: MaskOrigin,
    pub ratio: f64,
}

/// Exactly round(ratio * n) masked patches, sampled without replacement.
pub fn make_random_mask(n_patches: usize, ratio: f64, rng: &mut RandomStream) -> MaskSpec {
    let k = (ratio * n_patches as f64).round() as usize;
    let mut masked = rng.sample_without_replacement(n_patches, k.min(n_patches));
    masked.sort_unstable();
    let kept = complement(&masked, n_patches);
    MaskSpec {
        kept,
        masked,
        origin: MaskOrigin::RandomTraining,
        ratio,
    }
}

pub fn make_backdoor_mask(backdoor: &[usize], n_patches: usize) -> Result<MaskSpec> {
    for &i in backdoor {
        if i >= n_patches {
            return Err(BeraError::IndexOutOfRange {
                index: i,
                size: n_patches,
            });
        }
    }
    let mut masked = backdoor.to_vec();
    masked.sort_unstable();
    masked.dedup();
    let kept = complement(&masked, n_patches);
    let ratio = masked.len() as f64 / n_patches as f64;
    Ok(MaskSpec {
        kept,
        masked,
        origin: MaskOrigin::BackdoorSelective,
        ratio,
    })
}

fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeDims {
    pub p: usize,
    pub d_p: usize,
    pub d_e: usize,
    pub rows: usize,
    pub cols: usize,
}

impl MaeDims {
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * 3
    }
}

#[derive(Debug, Clone)]
pub struct MaeParams {
    pub dims: MaeDims,
    pub patch_embed_w: Vec<f64>, // patch_dim x d_p
    pub patch_embed_b: Vec<f64>, // d_p
    pub pos_embed: Vec<f64>,     // n_patches x d_p
    pub enc_qkv: Vec<f64>,       // d_p x 3 d_p
    pub enc_out: Vec<f64>,       // d_p x d_p
    pub mask_token: Vec<f64>,    // d_p
    pub global_proj: Vec<f64>,   // d_e x d_p
    pub dec_qkv: Vec<f64>,       // d_p x 3 d_p
    pub dec_out: Vec<f64>,       // d_p x d_p
    pub head_w: Vec<f64>,        // d_p x patch_dim
    pub head_b: Vec<f64>,        // patch_dim
}

pub const GROUP_NAMES: [&str; 11] = [
    "patch_embed_w",
    "patch_embed_b",
    "pos_embed",
    "enc_qkv",
    "enc_out",
    "mask_token",
    "global_proj",
    "dec_qkv",
    "dec_out",
    "head_w",
    "head_b",
];

impl MaeParams {
    pub fn init(dims: MaeDims, rng: &mut RandomStream) -> Self {
        let make = |label: u64, len: usize, scale: f64| -> Vec<f64> {
            let mut r = rng.derive_child(label);
            (0..len).map(|_| scale * r.next_normal()).collect()
        };
        let (dp, de, pd, np) = (dims.d_p, dims.d_e, dims.patch_dim(), dims.n_patches());
        MaeParams {
            dims,
            patch_embed_w: make(1, pd * dp, 0.02),
            patch_embed_b: vec![0.0; dp],
            pos_embed: make(2, np * dp, 0.02),
            enc_qkv: make(3, dp * 3 * dp, 0.02),
            enc_out: make(4, dp * dp, 0.02),
            mask_token: make(5, dp, 0.02),
            global_proj: make(6, de * dp, 0.02),
            dec_qkv: make(7, dp * 3 * dp, 0.02),
            dec_out: make(8, dp * dp, 0.02),
            head_w: make(9, dp * pd, 0.02),
            head_b: vec![0.0; pd],
        }
    }

    pub fn groups(&self) -> [(&'static str, &Vec<f64>); 11] {
        [
            (GROUP_NAMES[0], &self.patch_embed_w),
            (GROUP_NAMES[1], &self.patch_embed_b),
            (GROUP_NAMES[2], &self.pos_embed),
            (GROUP_NAMES[3], &self.enc_qkv),
            (GROUP_NAMES[4], &self.enc_out),
            (GROUP_NAMES[5], &self.mask_token),
            (GROUP_NAMES[6], &self.global_proj),
            (GROUP_NAMES[7], &self.dec_qkv),
            (GROUP_NAMES[8], &self.dec_out),
            (GROUP_NAMES[9], &self.head_w),
            (GROUP_NAMES[10], &self.head_b),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 11] {
        [
            (GROUP_NAMES[0], &mut self.patch_embed_w),
            (GROUP_NAMES[1], &mut self.patch_embed_b),
            (GROUP_NAMES[2], &mut self.pos_embed),
            (GROUP_NAMES[3], &mut self.enc_qkv),
            (GROUP_NAMES[4], &mut self.enc_out),
            (GROUP_NAMES[5], &mut self.mask_token),
            (GROUP_NAMES[6], &mut self.global_proj),
            (GROUP_NAMES[7], &mut self.dec_qkv),
            (GROUP_NAMES[8], &mut self.dec_out),
            (GROUP_NAMES[9], &mut self.head_w),
            (GROUP_NAMES[10], &mut self.head_b),
        ]
    }

    pub fn zeros_like(dims: MaeDims) -> Self {
        let (dp, de, pd, np) = (dims.d_p, dims.d_e, dims.patch_dim(), dims.n_patches());
        MaeParams {
            dims,
            patch_embed_w: vec![0.0; pd * dp],
            patch_embed_b: vec![0.0; dp],
            pos_embed: vec![0.0; np * dp],
            enc_qkv: vec![0.0; dp * 3 * dp],
            enc_out: vec![0.0; dp * dp],
            mask_token: vec![0.0; dp],
            global_proj: vec![0.0; de * dp],
            dec_qkv: vec![0.0; dp * 3 * dp],
            dec_out: vec![0.0; dp * dp],
            head_w: vec![0.0; dp * pd],
            head_b: vec![0.0; pd],
        }
    }

    pub fn add_scaled(&mut self, other: &MaeParams, c: f64) {
        for ((_, mine), (_, theirs)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (a, b) in mine.iter_mut().zip(theirs.iter()) {
                *a += c * b;
            }
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let d = &self.dims;
        a.push(
            "dims",
            Payload::F64 {
                shape: vec![5],
                data: vec![
                    d.p as f64,
                    d.d_p as f64,
                    d.d_e as f64,
                    d.rows as f64,
                    d.cols as f64,
                ],
            },
        );
        for (name, data) in self.groups() {
            a.push(
                name,
                Payload::F64 {
                    shape: vec![data.len()],
                    data: data.clone(),
                },
            );
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let dims = match a.require("dims")? {
            Payload::F64 { shape, data } if shape == &[5] => MaeDims {
                p: data[0] as usize,
                d_p: data[1] as usize,
                d_e: data[2] as usize,
                rows: data[3] as usize,
                cols: data[4] as usize,
            },
            _ => return Err(BeraError::CorruptFile("bad dims section".into())),
        };
        let mut out = MaeParams::zeros_like(dims);
        for (name, dst) in out.groups_mut() {
            match a.require(name)? {
                Payload::F64 { data, .. } if data.len() == dst.len() => {
                    dst.copy_from_slice(data);
                }
                other => {
                    return Err(BeraError::CorruptFile(format!(
                        "section {} has {} values, wanted {}",
                        name,
                        match other {
                            Payload::F64 { data, .. } => data.len(),
                            Payload::U8 { data, .. } => data.len(),
                        },
                        dst.len()
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// dense helpers (row-major)

fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// A^T B for A (k x m), B (k x n) -> (m x n).
fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for row in 0..k {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// A B^T for A (m x k), B (n x k) -> (m x n).
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// attention block

struct AttnCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
    n: usize,
}

fn attn_forward(x: &[f64], n: usize, d: usize, w_qkv: &[f64], w_out: &[f64]) -> (Vec<f64>, AttnCache) {
    let qkv = mm(x, n, d, w_qkv, 3 * d);
    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    for i in 0..n {
        q[i * d..(i + 1) * d].copy_from_slice(&qkv[i * 3 * d..i * 3 * d + d]);
        k[i * d..(i + 1) * d].copy_from_slice(&qkv[i * 3 * d + d..i * 3 * d + 2 * d]);
        v[i * d..(i + 1) * d].copy_from_slice(&qkv[i * 3 * d + 2 * d..(i + 1) * 3 * d]);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = mm_nt(&q, n, d, &k, n);
    for s in a.iter_mut() {
        *s *= scale;
    }
    // softmax rows
    for row in a.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    let c = mm(&a, n, n, &v, d);
    let proj = mm(&c, n, d, w_out, d);
    let mut out = x.to_vec();
    for (o, p) in out.iter_mut().zip(proj.iter()) {
        *o += p;
    }
    (
        out,
        AttnCache {
            x: x.to_vec(),
            q,
            k,
            v,
            a,
            c,
            n,
        },
    )
}

fn attn_backward(
    cache: &AttnCache,
    d: usize,
    w_qkv: &[f64],
    w_out: &[f64],
    d_out: &[f64],
    g_qkv: &mut [f64],
    g_out: &mut [f64],
) -> Vec<f64> {
    let n = cache.n;
    let scale = 1.0 / (d as f64).sqrt();
    // out = x + c . w_out
    let mut d_x = d_out.to_vec();
    let d_c = mm_nt(d_out, n, d, w_out, d);
    for (dst, src) in mm_tn(&cache.c, n, d, d_out, d).iter().enumerate() {
        g_out[dst] += src;
    }
    // c = a . v
    let d_a = mm_nt(&d_c, n, d, &cache.v, n);
    let d_v = mm_tn(&cache.a, n, n, &d_c, d);
    // softmax rows: dS_i = A_i o (dA_i - <dA_i, A_i>)
    let mut d_s = vec![0.0; n * n];
    for i in 0..n {
        let arow = &cache.a[i * n..(i + 1) * n];
        let darow = &d_a[i * n..(i + 1) * n];
        let dot: f64 = arow.iter().zip(darow).map(|(a, g)| a * g).sum();
        for j in 0..n {
            d_s[i * n + j] = arow[j] * (darow[j] - dot);
        }
    }
    // s = scale . q k^T
    let mut d_q = mm(&d_s, n, n, &cache.k, d);
    let mut d_k = mm_tn(&d_s, n, n, &cache.q, d);
    for v in d_q.iter_mut() {
        *v *= scale;
    }
    for v in d_k.iter_mut() {
        *v *= scale;
    }
    // pack qkv gradient
    let mut d_qkv = vec![0.0; n * 3 * d];
    for i in 0..n {
        d_qkv[i * 3 * d..i * 3 * d + d].copy_from_slice(&d_q[i * d..(i + 1) * d]);
        d_qkv[i * 3 * d + d..i * 3 * d + 2 * d].copy_from_slice(&d_k[i * d..(i + 1) * d]);
        d_qkv[i * 3 * d + 2 * d..(i + 1) * 3 * d].copy_from_slice(&d_v[i * d..(i + 1) * d]);
    }
    for (dst, src) in mm_tn(&cache.x, n, d, &d_qkv, 3 * d).iter().enumerate() {
        g_qkv[dst] += src;
    }
    let via_w = mm_nt(&d_qkv, n, 3 * d, w_qkv, d);
    for (a, b) in d_x.iter_mut().zip(via_w.iter()) {
        *a += b;
    }
    d_x
}

// ---------------------------------------------------------------------------
// forward / backward

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mean squared error over every pixel of the image.
    FullImage,
    /// Mean squared error over masked-patch pixels only (ablation).
    MaskedOnly,
}

struct ForwardCache {
    grid: PatchGrid,
    enc_cache: AttnCache,
    dec_cache: AttnCache,
    dec_out_seq: Vec<f64>,
    recon: Vec<f64>,
}

fn forward_inner(params: &MaeParams, e: &[f64], image: &Tensor, mask: &MaskSpec) -> Result<ForwardCache> {
    let dims = params.dims;
    let (dp, pd, np) = (dims.d_p, dims.patch_dim(), dims.n_patches());
    if e.len() != dims.d_e {
        return Err(BeraError::DimensionMismatch {
            expected: dims.d_e,
            got: e.len(),
        });
    }
    let grid = patchify(image, dims.p)?;
    if grid.rows != dims.rows || grid.cols != dims.cols {
        return Err(BeraError::ShapeMismatch(format!(
            "image grid {}x{} does not match model {}x{}",
            grid.rows, grid.cols, dims.rows, dims.cols
        )));
    }
    let nk = mask.kept.len();
    // Encoder: embed kept patches with bias + position.
    let mut enc_in = vec![0.0; nk * dp];
    for (slot, &idx) in mask.kept.iter().enumerate() {
        let patch = grid.patches.row(idx);
        let row = &mut enc_in[slot * dp..(slot + 1) * dp];
        row.copy_from_slice(&params.patch_embed_b);
        for (o, r) in row.iter_mut().zip(&params.pos_embed[idx * dp..(idx + 1) * dp]) {
            *o += r;
        }
        for (pi, &pv) in patch.iter().enumerate() {
            if pv == 0.0 {
                continue;
            }
            let wrow = &params.patch_embed_w[pi * dp..(pi + 1) * dp];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += pv * wv;
            }
        }
    }
    let (g, enc_cache) = attn_forward(&enc_in, nk, dp, &params.enc_qkv, &params.enc_out);
    // Decoder input: kept tokens in place, mask_token + pos at masked slots,
    // then the projected global embedding added everywhere.
    let ge = mm(e, 1, dims.d_e, &params.global_proj, dp);
    let mut dec_in = vec![0.0; np * dp];
    for (slot, &idx) in mask.kept.iter().enumerate() {
        dec_in[idx * dp..(idx + 1) * dp].copy_from_slice(&g[slot * dp..(slot + 1) * dp]);
    }
    for &idx in &mask.masked {
        let row = &mut dec_in[idx * dp..(idx + 1) * dp];
        for ((o, m), p) in row
            .iter_mut()
            .zip(&params.mask_token)
            .zip(&params.pos_embed[idx * dp..(idx + 1) * dp])
        {
            *o = m + p;
        }
    }
    for row in dec_in.chunks_mut(dp) {
        for (o, g) in row.iter_mut().zip(&ge) {
            *o += g;
        }
    }
    let (dec_out_seq, dec_cache) = attn_forward(&dec_in, np, dp, &params.dec_qkv, &params.dec_out);
    // Head: token -> patch pixels.
    let mut recon = mm(&dec_out_seq, np, dp, &params.head_w, pd);
    for row in recon.chunks_mut(pd) {
        for (o, b) in row.iter_mut().zip(&params.head_b) {
            *o += b;
        }
    }
    Ok(ForwardCache {
        grid,
        enc_cache,
        dec_cache,
        dec_out_seq,
        recon,
    })
}

/// Reconstruct the full image from visible patches and the global embedding.
/// Output is raw (not clamped); clamping happens at image emission.
pub fn forward_reconstruct(
    params: &MaeParams,
    e: &[f64],
    image: &Tensor,
    mask: &MaskSpec,
) -> Result<Tensor> {
    let cache = forward_inner(params, e, image, mask)?;
    let grid = PatchGrid {
        p: params.dims.p,
        rows: params.dims.rows,
        cols: params.dims.cols,
        patches: Tensor::new(
            vec![params.dims.n_patches(), params.dims.patch_dim()],
            cache.recon,
        )?,
    };
    Ok(unpatchify(&grid))
}

/// Loss and full parameter gradients for one (image, mask) pair.
pub fn loss_and_gradients(
    params: &MaeParams,
    e: &[f64],
    image: &Tensor,
    mask: &MaskSpec,
    mode: LossMode,
) -> Result<(f64, MaeParams)> {
    let dims = params.dims;
    let (dp, pd, np) = (dims.d_p, dims.patch_dim(), dims.n_patches());
    let cache = forward_inner(params, e, image, mask)?;
    let target = cache.grid.patches.data();

    // Pixel selection for the loss.
    let masked_flag: Vec<bool> = {
        let mut f = vec![false; np];
        for &i in &mask.masked {
            f[i] = true;
        }
        f
    };
    let denom = match mode {
        LossMode::FullImage => (np * pd) as f64,
        LossMode::MaskedOnly => ((mask.masked.len().max(1)) * pd) as f64,
    };
    let mut loss = 0.0;
    let mut d_recon = vec![0.0; np * pd];
    for i in 0..np {
        if mode == LossMode::MaskedOnly && !masked_flag[i] {
            continue;
        }
        for j in 0..pd {
            let diff = cache.recon[i * pd + j] - target[i * pd + j];
            loss += diff * diff;
            d_recon[i * pd + j] = 2.0 * diff / denom;
        }
    }
    loss /= denom;
    if !loss.is_finite() {
        return Err(BeraError::NonFiniteLoss { step: 0 });
    }

    let mut g = MaeParams::zeros_like(dims);
    // Head.
    for (dst, src) in mm_tn(&cache.dec_out_seq, np, dp, &d_recon, pd)
        .iter()
        .enumerate()
    {
        g.head_w[dst] += src;
    }
    for row in d_recon.chunks(pd) {
        for (b, v) in g.head_b.iter_mut().zip(row) {
            *b += v;
        }
    }
    let d_dec_out = mm_nt(&d_recon, np, pd, &params.head_w, dp);
    // Decoder attention.
    let d_dec_in = attn_backward(
        &cache.dec_cache,
        dp,
        &params.dec_qkv,
        &params.dec_out,
        &d_dec_out,
        &mut g.dec_qkv,
        &mut g.dec_out,
    );
    // Global projection: the same vector was added to every token.
    let mut d_ge = vec![0.0; dp];
    for row in d_dec_in.chunks(dp) {
        for (a, b) in d_ge.iter_mut().zip(row) {
            *a += b;
        }
    }
    for (i, &ev) in e.iter().enumerate() {
        let grow = &mut g.global_proj[i * dp..(i + 1) * dp];
        for (o, &dv) in grow.iter_mut().zip(&d_ge) {
            *o += ev * dv;
        }
    }
    // Mask token + positions at masked slots; encoder outputs at kept slots.
    let mut d_g_tokens = vec![0.0; mask.kept.len() * dp];
    for &idx in &mask.masked {
        let row = &d_dec_in[idx * dp..(idx + 1) * dp];
        for (m, v) in g.mask_token.iter_mut().zip(row) {
            *m += v;
        }
        let prow = &mut g.pos_embed[idx * dp..(idx + 1) * dp];
        for (p, v) in prow.iter_mut().zip(row) {
            *p += v;
        }
    }
    for (slot, &idx) in mask.kept.iter().enumerate() {
        d_g_tokens[slot * dp..(slot + 1) * dp].copy_from_slice(&d_dec_in[idx * dp..(idx + 1) * dp]);
    }
    // Encoder attention.
    let d_enc_in = attn_backward(
        &cache.enc_cache,
        dp,
        &params.enc_qkv,
        &params.enc_out,
        &d_g_tokens,
        &mut g.enc_qkv,
        &mut g.enc_out,
    );
    // Patch embedding.
    for (slot, &idx) in mask.kept.iter().enumerate() {
        let row = &d_enc_in[slot * dp..(slot + 1) * dp];
        for (b, v) in g.patch_embed_b.iter_mut().zip(row) {
            *b += v;
        }
        let prow = &mut g.pos_embed[idx * dp..(idx + 1) * dp];
        for (p, v) in prow.iter_mut().zip(row) {
            *p += v;
        }
        let patch = cache.grid.patches.row(idx);
        for (pi, &pv) in patch.iter().enumerate() {
            if pv == 0.0 {
                continue;
            }
            let wrow = &mut g.patch_embed_w[pi * dp..(pi + 1) * dp];
            for (o, &dv) in wrow.iter_mut().zip(row) {
                *o += pv * dv;
            }
        }
    }
    Ok((loss, g))
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_lo: f64,
    pub mask_hi: f64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask_lo: 0.05,
            mask_hi: 0.25,
            loss_mode: LossMode::FullImage,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: usize,
    pub mask_ratio: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: MaeParams,
    pub m: MaeParams,
    pub v: MaeParams,
    pub step: usize,
    pub loss_history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(params: MaeParams) -> Self {
        let dims = params.dims;
        TrainState {
            params,
            m: MaeParams::zeros_like(dims),
            v: MaeParams::zeros_like(dims),
            step: 0,
            loss_history: Vec::new(),
        }
    }

    fn adam_step(&mut self, grads: &MaeParams, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (((_, p), (_, m)), ((_, v), (_, g))) in self
            .params
            .groups_mut()
            .into_iter()
            .zip(self.m.groups_mut())
            .zip(self.v.groups_mut().into_iter().zip(grads.groups()))
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Train the reconstructor on clean images with per-step random masking.
/// `embeddings[i]` is the frozen encoder's global embedding for `images[i]`.
/// Batch items are evaluated independently (possibly in parallel) and
/// reduced in index order, so the run is deterministic for a fixed seed.
pub fn train_decoder(
    images: &[Tensor],
    embeddings: &[Vec<f64>],
    init: MaeParams,
    cfg: &TrainConfig,
    rng: &RandomStream,
) -> Result<TrainState> {
    if images.is_empty() {
        return Err(BeraError::EmptyInput("no training images"));
    }
    if images.len() != embeddings.len() {
        return Err(BeraError::DimensionMismatch {
            expected: images.len(),
            got: embeddings.len(),
        });
    }
    let mut state = TrainState::new(init);
    let n_patches = state.params.dims.n_patches();
    for step in 0..cfg.steps {
        let mut step_rng = rng.derive_child(step as u64);
        let ratio = step_rng.next_range(cfg.mask_lo, cfg.mask_hi);
        let batch = cfg.batch.min(images.len());
        let picks = step_rng.sample_without_replacement(images.len(), batch);
        let mask_seed = step_rng.next_u64();
        let params = &state.params;
        let results: Vec<Result<(f64, MaeParams)>> = par::map_indexed(batch, |bi| {
            let idx = picks[bi];
            let mut mask_rng = RandomStream::new(mask_seed).derive_child(bi as u64);
            let mask = make_random_mask(n_patches, ratio, &mut mask_rng);
            loss_and_gradients(params, &embeddings[idx], &images[idx], &mask, cfg.loss_mode)
        });
        let mut total_loss = 0.0;
        let mut total_grads = MaeParams::zeros_like(state.params.dims);
        for r in results {
            let (loss, g) = r.map_err(|err| match err {
                BeraError::NonFiniteLoss { .. } => BeraError::NonFiniteLoss { step },
                other => other,
            })?;
            total_loss += loss;
            total_grads.add_scaled(&g, 1.0);
        }
        let inv = 1.0 / batch as f64;
        total_loss *= inv;
        for (_, g) in total_grads.groups_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        if !total_loss.is_finite() {
            return Err(BeraError::NonFiniteLoss { step });
        }
        state.adam_step(&total_grads, cfg);
        state.loss_history.push(LossRecord {
            step,
            mask_ratio: ratio,
            loss: total_loss,
        });
    }
    Ok(state)
}

/// Erase the detected backdoor region. Empty detections pass the input
/// through untouched; otherwise the image is reconstructed under the
/// trigger-selective mask and clamped to [0, 1] as an emitted image.
pub fn purify(
    params: &MaeParams,
    e: &[f64],
    image: &Tensor,
    backdoor: &[usize],
) -> Result<Tensor> {
    if backdoor.is_empty() {
        return Ok(image.clone());
    }
    let mask = make_backdoor_mask(backdoor, params.dims.n_patches())?;
    let mut out = forward_reconstruct(params, e, image, &mask)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Normalized cross-correlation between an image region and a template of
/// the same extent. Zero-variance inputs return 0 by convention.
pub fn trigger_residual(
    image: &Tensor,
    template: &Tensor,
    region: (usize, usize),
) -> Result<f64> {
    if template.ndim() != 3 || image.ndim() != 3 {
        return Err(BeraError::ShapeMismatch("need H x W x 3 tensors".into()));
    }
    let (th, tw) = (template.shape()[0], template.shape()[1]);
    let (y0, x0) = region;
    if y0 + th > image.shape()[0] || x0 + tw > image.shape()[1] {
        return Err(BeraError::IndexOutOfRange {
            index: (y0 + th).max(x0 + tw),
            size: image.shape()[0].max(image.shape()[1]),
        });
    }
    let n = (th * tw * 3) as f64;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for y in 0..th {
        for x in 0..tw {
            for c in 0..3 {
                sa += image.at3(y0 + y, x0 + x, c);
                sb += template.at3(y, x, c);
            }
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for y in 0..th {
        for x in 0..tw {
            for c in 0..3 {
                let a = image.at3(y0 + y, x0 + x, c) - ma;
                let b = template.at3(y, x, c) - mb;
                cov += a * b;
                va += a * a;
                vb += b * b;
            }
        }
    }
    if va <= 1e-18 || vb <= 1e-18 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_dims() -> MaeDims {
        MaeDims {
            p: 8,
            d_p: 16,
            d_e: 8,
            rows: 2,
            cols: 2,
        }
    }

    fn random_image(h: usize, w: usize, rng: &mut RandomStream) -> Tensor {
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.next_f64()).collect();
        Tensor::new(vec![h, w, 3], data).unwrap()
    }

    #[test]
    fn single_patch_image() {
        let mut rng = RandomStream::new(1);
        let img = random_image(4, 4, &mut rng);
        let g = patchify(&img, 4).unwrap();
        assert_eq!(g.patches.shape(), &[1, 48]);
        assert_eq!(unpatchify(&g), img);
    }

    #[test]
    fn patchify_roundtrip_is_bitwise() {
        let mut rng = RandomStream::new(2);
        let img = random_image(32, 32, &mut rng);
        let g = patchify(&img, 8).unwrap();
        let back = unpatchify(&g);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn patch_content_matches_hand_slice() {
        let mut rng = RandomStream::new(3);
        let img = random_image(16, 24, &mut rng);
        let g = patchify(&img, 8).unwrap();
        // Patch (1, 2) covers rows 8..16, cols 16..24.
        let patch = g.patches.row(1 * 3 + 2);
        for py in 0..8 {
            for px in 0..8 {
                for c in 0..3 {
                    assert_eq!(patch[(py * 8 + px) * 3 + c], img.at3(8 + py, 16 + px, c));
                }
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let img = Tensor::zeros(vec![10, 10, 3]);
        assert!(matches!(
            patchify(&img, 8),
            Err(BeraError::IndivisibleDimensions { .. })
        ));
    }

    #[test]
    fn random_mask_counts() {
        let mut rng = RandomStream::new(4);
        let m = make_random_mask(100, 0.25, &mut rng);
        assert_eq!(m.masked.len(), 25);
        assert_eq!(m.kept.len(), 75);
        let zero = make_random_mask(100, 0.0, &mut rng);
        assert!(zero.masked.is_empty());
        assert_eq!(zero.kept.len(), 100);
    }

    #[test]
    fn random_mask_partition_and_determinism() {
        let mut a = RandomStream::new(9);
        let mut b = RandomStream::new(9);
        let ma = make_random_mask(64, 0.17, &mut a);
        let mb = make_random_mask(64, 0.17, &mut b);
        assert_eq!(ma.masked, mb.masked);
        let mut all: Vec<usize> = ma.kept.iter().chain(ma.masked.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn backdoor_mask_is_exact() {
        let m = make_backdoor_mask(&[5, 0], 16).unwrap();
        assert_eq!(m.masked, vec![0, 5]);
        assert_eq!(m.kept.len(), 14);
        assert_eq!(m.origin, MaskOrigin::BackdoorSelective);
        let empty = make_backdoor_mask(&[], 16).unwrap();
        assert!(empty.masked.is_empty());
        assert!(matches!(
            make_backdoor_mask(&[16], 16),
            Err(BeraError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn dead_head_outputs_bias_image() {
        let mut rng = RandomStream::new(5);
        let dims = micro_dims();
        let mut params = MaeParams::init(dims, &mut rng);
        params.head_w.iter_mut().for_each(|v| *v = 0.0);
        params.head_b.iter_mut().for_each(|v| *v = 0.37);
        let img = random_image(16, 16, &mut rng);
        let e = vec![0.1; dims.d_e];
        let mut mrng = RandomStream::new(0);
        let mask = make_random_mask(4, 0.25, &mut mrng);
        let out = forward_reconstruct(&params, &e, &img, &mask).unwrap();
        for v in out.data() {
            assert_eq!(*v, 0.37);
        }
    }

    #[test]
    fn masked_pixels_cannot_leak_through_encoder() {
        let mut rng = RandomStream::new(6);
        let dims = micro_dims();
        let params = MaeParams::init(dims, &mut rng);
        let img = random_image(16, 16, &mut rng);
        let e = vec![0.05; dims.d_e];
        let mask = make_backdoor_mask(&[2], 4).unwrap();
        let base = forward_reconstruct(&params, &e, &img, &mask).unwrap();
        // Scribble over the masked patch (patch 2 = rows 8.., cols 0..8).
        let mut poked = img.clone();
        for y in 8..16 {
            for x in 0..8 {
                for c in 0..3 {
                    poked.set3(y, x, c, 0.999);
                }
            }
        }
        let out = forward_reconstruct(&params, &e, &poked, &mask).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn perfect_reconstruction_means_zero_loss_and_gradients() {
        let mut rng = RandomStream::new(7);
        let dims = micro_dims();
        let mut params = MaeParams::init(dims, &mut rng);
        params.head_w.iter_mut().for_each(|v| *v = 0.0);
        params.head_b.iter_mut().for_each(|v| *v = 0.5);
        let img = Tensor::filled(vec![16, 16, 3], 0.5);
        let e = vec![0.2; dims.d_e];
        let mask = make_backdoor_mask(&[1], 4).unwrap();
        let (loss, g) = loss_and_gradients(&params, &e, &img, &mask, LossMode::FullImage).unwrap();
        assert_eq!(loss, 0.0);
        for (_, grp) in g.groups() {
            for v in grp {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn quadratic_loss_scaling() {
        let mut rng = RandomStream::new(8);
        let dims = micro_dims();
        let mut params = MaeParams::init(dims, &mut rng);
        params.head_w.iter_mut().for_each(|v| *v = 0.0);
        params.head_b.iter_mut().for_each(|v| *v = 0.5);
        let e = vec![0.2; dims.d_e];
        let mask = make_backdoor_mask(&[3], 4).unwrap();
        let img1 = Tensor::filled(vec![16, 16, 3], 0.5 + 0.1);
        let img2 = Tensor::filled(vec![16, 16, 3], 0.5 + 0.2);
        let (l1, _) = loss_and_gradients(&params, &e, &img1, &mask, LossMode::FullImage).unwrap();
        let (l2, _) = loss_and_gradients(&params, &e, &img2, &mask, LossMode::FullImage).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_gradients() {
        let mut rng = RandomStream::new(10);
        let dims = micro_dims();
        let params = MaeParams::init(dims, &mut rng);
        let img = random_image(16, 16, &mut rng);
        let e: Vec<f64> = (0..dims.d_e).map(|_| rng.next_normal() * 0.1).collect();
        let mut mrng = RandomStream::new(1);
        let mask = make_random_mask(4, 0.25, &mut mrng);
        let (_, analytic) =
            loss_and_gradients(&params, &e, &img, &mask, LossMode::FullImage).unwrap();
        let h = 1e-5;
        for gi in 0..GROUP_NAMES.len() {
            let len = params.groups()[gi].1.len();
            // A few spread-out coordinates per group.
            for probe in 0..4 {
                let ci = (probe * 37 + 11) % len;
                let mut plus = params.clone();
                plus.groups_mut()[gi].1[ci] += h;
                let (lp, _) =
                    loss_and_gradients(&plus, &e, &img, &mask, LossMode::FullImage).unwrap();
                let mut minus = params.clone();
                minus.groups_mut()[gi].1[ci] -= h;
                let (lm, _) =
                    loss_and_gradients(&minus, &e, &img, &mask, LossMode::FullImage).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic.groups()[gi].1[ci];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "group {} coord {}: fd {} vs analytic {}",
                    GROUP_NAMES[gi],
                    ci,
                    fd,
                    an
                );
            }
        }
    }

    #[test]
    fn masked_only_loss_ignores_kept_pixels() {
        let mut rng = RandomStream::new(11);
        let dims = micro_dims();
        let mut params = MaeParams::init(dims, &mut rng);
        params.head_w.iter_mut().for_each(|v| *v = 0.0);
        params.head_b.iter_mut().for_each(|v| *v = 0.5);
        // Reconstruction is 0.5 everywhere. Image is 0.5 on the masked
        // patch 0 (rows 0..8, cols 0..8) and random elsewhere, so the
        // masked-only loss is exactly zero while full-image loss is not.
        let mut img = random_image(16, 16, &mut rng);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    img.set3(y, x, c, 0.5);
                }
            }
        }
        let e = vec![0.0; dims.d_e];
        let mask = make_backdoor_mask(&[0], 4).unwrap();
        let (lm, gm) = loss_and_gradients(&params, &e, &img, &mask, LossMode::MaskedOnly).unwrap();
        let (lf, _) = loss_and_gradients(&params, &e, &img, &mask, LossMode::FullImage).unwrap();
        assert_eq!(lm, 0.0);
        assert!(lf > 0.0);
        for (_, grp) in gm.groups() {
            for v in grp {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = RandomStream::new(12);
        let dims = micro_dims();
        let images: Vec<Tensor> = (0..6).map(|_| random_image(16, 16, &mut rng)).collect();
        let es: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..dims.d_e).map(|_| 0.1 * rng.next_normal()).collect())
            .collect();
        let cfg = TrainConfig {
            steps: 60,
            batch: 4,
            ..TrainConfig::default()
        };
        let root = RandomStream::new(777);
        let init = MaeParams::init(dims, &mut root.derive_child(0));
        let s1 = train_decoder(&images, &es, init.clone(), &cfg, &root.derive_child(1)).unwrap();
        let s2 = train_decoder(&images, &es, init, &cfg, &root.derive_child(1)).unwrap();
        let first = s1.loss_history.first().unwrap().loss;
        let last = s1.loss_history.last().unwrap().loss;
        assert!(last < first, "loss {} -> {}", first, last);
        for (a, b) in s1.loss_history.iter().zip(&s2.loss_history) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.mask_ratio.to_bits(), b.mask_ratio.to_bits());
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_fixed() {
        let mut rng = RandomStream::new(13);
        let dims = micro_dims();
        let images: Vec<Tensor> = (0..3).map(|_| random_image(16, 16, &mut rng)).collect();
        let es = vec![vec![0.0; dims.d_e]; 3];
        let cfg = TrainConfig {
            steps: 10,
            batch: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let root = RandomStream::new(5);
        let init = MaeParams::init(dims, &mut root.derive_child(0));
        let s = train_decoder(&images, &es, init.clone(), &cfg, &root.derive_child(1)).unwrap();
        for ((_, a), (_, b)) in s.params.groups().into_iter().zip(init.groups()) {
            assert_eq!(a, b);
        }
        assert_eq!(s.loss_history.len(), 10);
    }

    #[test]
    fn purify_passthrough_on_empty_detection() {
        let mut rng = RandomStream::new(14);
        let dims = micro_dims();
        let params = MaeParams::init(dims, &mut rng);
        let img = random_image(16, 16, &mut rng);
        let out = purify(&params, &vec![0.0; dims.d_e], &img, &[]).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn purify_output_is_clamped() {
        let mut rng = RandomStream::new(15);
        let dims = micro_dims();
        let mut params = MaeParams::init(dims, &mut rng);
        params.head_b.iter_mut().for_each(|v| *v = 3.0);
        let img = random_image(16, 16, &mut rng);
        let out = purify(&params, &vec![0.0; dims.d_e], &img, &[0]).unwrap();
        for v in out.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn params_roundtrip_bitwise() {
        let mut rng = RandomStream::new(16);
        let params = MaeParams::init(micro_dims(), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dec.btfa");
        params.save(&path).unwrap();
        let back = MaeParams::load(&path).unwrap();
        assert_eq!(params.dims, back.dims);
        for ((_, a), (_, b)) in params.groups().into_iter().zip(back.groups()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn residual_of_exact_template_is_one() {
        let mut rng = RandomStream::new(17);
        let tpl = random_image(8, 8, &mut rng);
        let mut img = Tensor::zeros(vec![32, 32, 3]);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    img.set3(10 + y, 5 + x, c, tpl.at3(y, x, c));
                }
            }
        }
        let r = trigger_residual(&img, &tpl, (10, 5)).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_of_constant_region_is_zero() {
        let mut rng = RandomStream::new(18);
        let tpl = random_image(8, 8, &mut rng);
        let img = Tensor::filled(vec![32, 32, 3], 0.5);
        assert_eq!(trigger_residual(&img, &tpl, (0, 0)).unwrap(), 0.0);
    }

    #[test]
    fn residual_region_bounds_checked() {
        let tpl = Tensor::zeros(vec![8, 8, 3]);
        let img = Tensor::zeros(vec![16, 16, 3]);
        assert!(trigger_residual(&img, &tpl, (10, 0)).is_err());
    }
}
