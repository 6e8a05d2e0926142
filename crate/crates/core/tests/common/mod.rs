//! Independent reference implementations used as test oracles. Everything
//! here works on nested `Vec<Vec<f64>>` grids with explicit loops and shares
//! no code with the library beyond reading pixels.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod scenarios;

use atfuse::image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn grid(img: &GrayImage) -> Grid {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(y, x) as f64).collect()).collect()
}

pub fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).map(|_| rng.random_range(0.0..=1.0f32)).collect();
    GrayImage::new(h, w, px).unwrap()
}

/// Mirror without repeating the edge sample: -1 -> 1, n -> n - 2.
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

pub fn correlate(g: &Grid, k: [[f64; 3]; 3]) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    let sy = mirror(y as i64 + dy as i64 - 1, h);
                    let sx = mirror(x as i64 + dx as i64 - 1, w);
                    s += kv * g[sy][sx];
                }
            }
            out[y][x] = s;
        }
    }
    out
}

pub fn sobel(g: &Grid) -> (Grid, Grid) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    (correlate(g, kx), correlate(g, ky))
}

pub fn grad_l1(g: &Grid) -> Grid {
    let (gx, gy) = sobel(g);
    gx.iter().zip(&gy).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p.abs() + q.abs()).collect()).collect()
}

// --- metrics -------------------------------------------------------------

pub fn ag(img: &GrayImage) -> f64 {
    let g = grid(img);
    let (h, w) = (g.len(), g[0].len());
    let mut s = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = 255.0 * (g[y][x + 1] - g[y][x]);
            let dy = 255.0 * (g[y + 1][x] - g[y][x]);
            s += (0.5 * (dx * dx + dy * dy)).sqrt();
        }
    }
    s / ((h - 1) * (w - 1)) as f64
}

pub fn en(img: &GrayImage) -> f64 {
    let g = grid(img);
    let mut counts = vec![0.0f64; 256];
    let mut n = 0.0;
    for row in &g {
        for &v in row {
            let level = (v * 255.0).round() as usize;
            counts[level] += 1.0;
            n += 1.0;
        }
    }
    let mut e = 0.0;
    for c in counts {
        if c > 0.0 {
            e -= (c / n) * (c / n).log2();
        }
    }
    e
}

pub fn sd(img: &GrayImage) -> f64 {
    let g = grid(img);
    let n = (g.len() * g[0].len()) as f64;
    let mean: f64 = g.iter().flatten().map(|v| 255.0 * v).sum::<f64>() / n;
    let var: f64 = g.iter().flatten().map(|v| (255.0 * v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

pub fn sf(img: &GrayImage) -> f64 {
    let g = grid(img);
    let (h, w) = (g.len(), g[0].len());
    let mut rf = 0.0;
    for y in 0..h {
        for x in 1..w {
            rf += (g[y][x] - g[y][x - 1]).powi(2);
        }
    }
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            cf += (g[y][x] - g[y - 1][x]).powi(2);
        }
    }
    rf /= (h * (w - 1)) as f64;
    cf /= ((h - 1) * w) as f64;
    (rf + cf).sqrt()
}

pub fn qabf(f: &GrayImage, a: &GrayImage, b: &GrayImage) -> f64 {
    let edge = |img: &GrayImage| {
        let (gx, gy) = sobel(&grid(img));
        let (h, w) = (gx.len(), gx[0].len());
        let mut strength = vec![vec![0.0; w]; h];
        let mut angle = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                strength[y][x] = gx[y][x].hypot(gy[y][x]);
                angle[y][x] = if gx[y][x] == 0.0 { std::f64::consts::FRAC_PI_2 } else { (gy[y][x] / gx[y][x]).atan() };
            }
        }
        (strength, angle)
    };
    let (sf_, af) = edge(f);
    let (sa, aa) = edge(a);
    let (sb, ab) = edge(b);
    let q = |gs: f64, gf: f64, as_: f64, af_: f64| {
        let g = if gs == 0.0 || gf == 0.0 { 0.0 } else { gs.min(gf) / gs.max(gf) };
        let d = (as_ - af_).abs();
        let o = if d <= std::f64::consts::FRAC_PI_2 {
            1.0 - d / std::f64::consts::FRAC_PI_2
        } else {
            d / std::f64::consts::FRAC_PI_2 - 1.0
        };
        let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
        let qa = 0.9879 / (1.0 + (-22.0 * (o - 0.8)).exp());
        qg * qa
    };
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..sf_.len() {
        for x in 0..sf_[0].len() {
            if sa[y][x] == 0.0 && sb[y][x] == 0.0 {
                continue;
            }
            num += q(sa[y][x], sf_[y][x], aa[y][x], af[y][x]) * sa[y][x];
            num += q(sb[y][x], sf_[y][x], ab[y][x], af[y][x]) * sb[y][x];
            den += sa[y][x] + sb[y][x];
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

// --- losses --------------------------------------------------------------

pub fn importance(img: &GrayImage) -> Grid {
    let g = grid(img);
    let m = grad_l1(&g);
    g.iter().zip(&m).map(|(r, s)| r.iter().zip(s).map(|(v, d)| v * d).collect()).collect()
}

/// Pixels ranked in the top `ceil(alpha% * n)` of `pi`, ties with the last
/// admitted value included.
pub fn top_set(pi: &Grid, alpha: f64) -> Vec<bool> {
    let flat: Vec<f64> = pi.iter().flatten().copied().collect();
    let n = flat.len();
    let k = (alpha * n as f64 / 100.0).ceil() as usize;
    if k == 0 {
        return vec![false; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| flat[j].partial_cmp(&flat[i]).unwrap());
    let cutoff = flat[order[k - 1]];
    flat.iter().map(|&v| v >= cutoff).collect()
}

pub fn part1(ir: &GrayImage, vi: &GrayImage, alpha: f64) -> Vec<bool> {
    let a = top_set(&importance(ir), alpha);
    let b = top_set(&importance(vi), alpha);
    a.iter().zip(&b).map(|(x, y)| *x || *y).collect()
}

/// Max constraint on every pixel.
pub fn max_constraint(f: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> f64 {
    let (f, a, b) = (grid(f), grid(ir), grid(vi));
    let n = (f.len() * f[0].len()) as f64;
    let mut s = 0.0;
    for y in 0..f.len() {
        for x in 0..f[0].len() {
            s += (f[y][x] - a[y][x].max(b[y][x])).abs();
        }
    }
    s / n
}

/// Average constraint on every pixel.
pub fn average_constraint(f: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> f64 {
    let (f, a, b) = (grid(f), grid(ir), grid(vi));
    let n = (f.len() * f[0].len()) as f64;
    let mut s = 0.0;
    for y in 0..f.len() {
        for x in 0..f[0].len() {
            s += (f[y][x] - a[y][x]).abs() + (f[y][x] - b[y][x]).abs();
        }
    }
    s / (2.0 * n)
}

/// Pixel loss with the given part1 membership, term by term.
pub fn segmented(f: &GrayImage, ir: &GrayImage, vi: &GrayImage, part1: &[bool]) -> (f64, f64) {
    let (f, a, b) = (grid(f), grid(ir), grid(vi));
    let w = f[0].len();
    let n = (f.len() * w) as f64;
    let (mut p1, mut p2) = (0.0, 0.0);
    for y in 0..f.len() {
        for x in 0..w {
            if part1[y * w + x] {
                p1 += (f[y][x] - a[y][x].max(b[y][x])).abs();
            } else {
                p2 += (f[y][x] - a[y][x]).abs() + (f[y][x] - b[y][x]).abs();
            }
        }
    }
    (p1 / n, p2 / (2.0 * n))
}

pub fn texture(f: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> f64 {
    let (gf, ga, gb) = (grad_l1(&grid(f)), grad_l1(&grid(ir)), grad_l1(&grid(vi)));
    let n = (gf.len() * gf[0].len()) as f64;
    let mut s = 0.0;
    for y in 0..gf.len() {
        for x in 0..gf[0].len() {
            s += (gf[y][x] - ga[y][x].max(gb[y][x])).abs();
        }
    }
    s / n
}
