//! Central finite-difference checks of autodiff gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-5;

/// One-sided slopes that disagree by more than this fraction mark a kink.
pub const KINK_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Set when the stencil straddles a non-differentiable point.
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.excluded)
            .fold(0.0, |m, e| m.max(e.rel_error))
    }

    pub fn excluded(&self) -> usize {
        self.entries.iter().filter(|e| e.excluded).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !e.excluded && !(e.rel_error <= self.tol))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()).max(GRAD_FLOOR))
}

fn entry(index: usize, analytic: f64, h: f64, plus: f64, center: f64, minus: f64) -> GradCheckEntry {
    let numeric = (plus - minus) / (2.0 * h);
    let right = (plus - center) / h;
    let left = (center - minus) / h;
    let scale = right.abs().max(left.abs()).max(1.0);
    GradCheckEntry {
        index,
        analytic,
        numeric,
        rel_error: relative_error(analytic, numeric),
        excluded: (right - left).abs() > KINK_THRESHOLD * scale,
    }
}

fn scalar(graph: &Graph, v: Var) -> f64 {
    graph.value(v).data()[0]
}

/// Checks d f / d x for every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, tol, &all)
}

/// Like [`grad_check`] but only for the listed element indices.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f64, tol: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let center = scalar(&g, loss);
    let grads = g.backward(loss)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let eval = |xp: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(xp);
        let out = f(&mut g, v)?;
        Ok(scalar(&g, out))
    };
    let mut entries = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let plus = eval(xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let minus = eval(xm)?;
        entries.push(entry(i, analytic[i], h, plus, center, minus));
    }
    Ok(GradCheckReport {
        label: "input".into(),
        tol,
        entries,
    })
}

/// Checks the gradient of a loss with respect to stored parameters.
///
/// `f` builds the loss from the store; `targets` lists which parameter
/// entries to probe. One report is returned per parameter, labelled with
/// its registered name.
pub fn grad_check_params<F>(
    store: &ParamStore,
    targets: &[(ParamId, Vec<usize>)],
    f: F,
    h: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    let center = scalar(&g, loss);
    g.backward_into(loss, &mut work)?;
    drop(g);

    let mut reports = Vec::with_capacity(targets.len());
    for (id, indices) in targets {
        let analytic = work
            .get(*id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; work.get(*id).numel()]);
        let mut entries = Vec::with_capacity(indices.len());
        for &i in indices {
            let original = work.get(*id).data()[i];
            let mut probe = |delta: f64| -> Result<f64> {
                work.get_mut(*id).data_mut()[i] = original + delta;
                let mut g = Graph::new();
                let out = f(&mut g, &work)?;
                Ok(scalar(&g, out))
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            work.get_mut(*id).data_mut()[i] = original;
            entries.push(entry(i, analytic[i], h, plus, center, minus));
        }
        reports.push(GradCheckReport {
            label: work.name(*id).to_string(),
            tol,
            entries,
        });
    }
    Ok(reports)
}

fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = crate::rng::SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Gradient checks of every primitive (and each operand of the binary
/// ones) on small seeded inputs. Each report is labelled with the
/// primitive and operand it covers; outputs are contracted with fixed
/// random weights so that every output element carries its own upstream
/// gradient.
pub fn primitive_suite(h: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
    let x = seeded(&[3, 4], 5, -1.0, 1.0);
    let pos = seeded(&[3, 4], 6, 0.5, 2.0);
    let row = seeded(&[1, 4], 8, -1.0, 1.0);
    let rhs = seeded(&[4, 2], 9, -1.0, 1.0);
    let side = seeded(&[3, 2], 10, -1.0, 1.0);
    let img = seeded(&[2, 3, 7, 6], 11, -1.0, 1.0);
    let ker = seeded(&[4, 3, 3, 3], 12, -1.0, 1.0);
    let timg = seeded(&[2, 4, 3, 4], 13, -1.0, 1.0);
    let tker = seeded(&[4, 2, 3, 3], 14, -1.0, 1.0);

    let constant = |t: &Tensor| {
        let t = t.clone();
        move |g: &mut Graph| g.constant(t.clone())
    };
    let (c_row, c_x, c_rhs, c_side) = (constant(&row), constant(&x), constant(&rhs), constant(&side));
    let (c_img, c_ker, c_timg, c_tker) = (constant(&img), constant(&ker), constant(&timg), constant(&tker));

    let cases: Vec<(&str, Tensor, Build)> = vec![
        ("add lhs", x.clone(), Box::new(move |g: &mut Graph, v| { let o = c_row(g); g.add(v, o) })),
        ("add broadcast rhs", row.clone(), { let c = c_x.clone(); Box::new(move |g: &mut Graph, v| { let o = c(g); g.add(o, v) }) }),
        ("sub lhs", x.clone(), { let c = constant(&row); Box::new(move |g: &mut Graph, v| { let o = c(g); g.sub(v, o) }) }),
        ("sub broadcast rhs", row.clone(), { let c = c_x.clone(); Box::new(move |g: &mut Graph, v| { let o = c(g); g.sub(o, v) }) }),
        ("mul lhs", x.clone(), { let c = constant(&row); Box::new(move |g: &mut Graph, v| { let o = c(g); g.mul(v, o) }) }),
        ("mul broadcast rhs", row.clone(), { let c = c_x.clone(); Box::new(move |g: &mut Graph, v| { let o = c(g); g.mul(o, v) }) }),
        ("matmul lhs", x.clone(), Box::new(move |g: &mut Graph, v| { let o = c_rhs(g); g.matmul(v, o) })),
        ("matmul rhs", rhs.clone(), { let c = c_x.clone(); Box::new(move |g: &mut Graph, v| { let o = c(g); g.matmul(o, v) }) }),
        ("conv2d input", img.clone(), Box::new(move |g: &mut Graph, v| { let k = c_ker(g); g.conv2d(v, k, 2, 1) })),
        ("conv2d kernel", ker.clone(), Box::new(move |g: &mut Graph, v| { let x = c_img(g); g.conv2d(x, v, 2, 1) })),
        ("conv2d_transpose input", timg.clone(), Box::new(move |g: &mut Graph, v| { let k = c_tker(g); g.conv2d_transpose(v, k, 2, 1, 1) })),
        ("conv2d_transpose kernel", tker.clone(), Box::new(move |g: &mut Graph, v| { let x = c_timg(g); g.conv2d_transpose(x, v, 2, 1, 1) })),
        ("relu", x.clone(), Box::new(|g: &mut Graph, v| g.relu(v))),
        ("leaky_relu", x.clone(), Box::new(|g: &mut Graph, v| g.leaky_relu(v))),
        ("tanh", x.clone(), Box::new(|g: &mut Graph, v| g.tanh(v))),
        ("sigmoid", x.clone(), Box::new(|g: &mut Graph, v| g.sigmoid(v))),
        ("exp", x.clone(), Box::new(|g: &mut Graph, v| g.exp(v))),
        ("log", pos, Box::new(|g: &mut Graph, v| g.log(v))),
        ("sum", x.clone(), Box::new(|g: &mut Graph, v| g.sum(v))),
        ("sum axes", x.clone(), Box::new(|g: &mut Graph, v| g.sum_axes(v, &[0]))),
        ("mean", x.clone(), Box::new(|g: &mut Graph, v| g.mean(v))),
        ("mean axes", x.clone(), Box::new(|g: &mut Graph, v| g.mean_axes(v, &[1]))),
        ("reshape", x.clone(), Box::new(|g: &mut Graph, v| g.reshape(v, &[2, 6]))),
        ("concat", x.clone(), Box::new(move |g: &mut Graph, v| { let o = c_side(g); g.concat(&[o, v], 1) })),
        ("clamp", x.clone(), Box::new(|g: &mut Graph, v| g.clamp(v, -0.5, 0.5))),
        ("softmax", x.clone(), Box::new(|g: &mut Graph, v| g.softmax(v))),
        ("gaussian_noise_like", x.clone(), Box::new(|g: &mut Graph, v| { let n = g.gaussian_noise_like(v, 3)?; g.add(v, n) })),
        ("log_softmax", x, Box::new(|g: &mut Graph, v| g.log_softmax(v))),
    ];

    let mut reports = Vec::with_capacity(cases.len());
    for (label, input, build) in cases {
        let mut report = grad_check(
            |g, v| {
                let y = build(g, v)?;
                let w = g.constant(seeded(g.shape(y), 99, -1.0, 1.0));
                let p = g.mul(y, w)?;
                g.sum(p)
            },
            &input,
            h,
            tol,
        )?;
        report.label = label.to_string();
        reports.push(report);
    }
    Ok(reports)
}
