//! Finite-difference gradient cases for every differentiable op and block.

use effnas::blocks::{Builder, DualPathDownDef, FfnDef, MhsaDef, MhsaGeometry, PlainDownDef, StemDef};
use effnas::tensor::{Mode, StatsStore, Tensor, Weights};
use rand::Rng;

use super::{check_inputs, check_params, randn, rng};

pub const SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const BLOCK_TOL: f64 = 1e-3;

/// One gradient check; `check(seed)` returns the worst relative error.
pub struct Case {
    pub name: String,
    pub tol: f64,
    pub check: Box<dyn Fn(u64) -> f64>,
}

impl Case {
    fn new(name: impl Into<String>, tol: f64, check: impl Fn(u64) -> f64 + 'static) -> Self {
        Case {
            name: name.into(),
            tol,
            check: Box::new(check),
        }
    }

    pub fn worst(&self, seeds: u64) -> f64 {
        (0..seeds).map(|s| (self.check)(s)).fold(0.0, f64::max)
    }
}

pub fn op_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (cin, cout, stride, groups) in [(2, 4, 1, 1), (4, 4, 1, 4), (2, 4, 2, 1), (4, 6, 1, 2)] {
        out.push(Case::new(
            format!("conv2d cin={cin} cout={cout} stride={stride} groups={groups}"),
            OP_TOL,
            move |s| {
                let mut r = rng(s);
                let x = randn(&mut r, &[1, cin, 5, 5]);
                let w = randn(&mut r, &[cout, cin / groups, 3, 3]);
                let b = randn(&mut r, &[cout]);
                check_inputs(&[x, w, b], Mode::Eval, s, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, 1, groups))
            },
        ));
    }
    out.push(Case::new("conv2d pointwise", OP_TOL, |s| {
        let mut r = rng(s);
        let x = randn(&mut r, &[2, 3, 4, 4]);
        let w = randn(&mut r, &[5, 3, 1, 1]);
        check_inputs(&[x, w], Mode::Eval, s, |t, v| t.conv2d(v[0], v[1], None, 1, 0, 1))
    }));
    out.push(Case::new("matmul", OP_TOL, |s| {
        let mut r = rng(s);
        let a = randn(&mut r, &[1, 1, 4, 4]);
        let b = randn(&mut r, &[1, 1, 4, 4]);
        check_inputs(&[a, b], Mode::Eval, s, |t, v| t.matmul(v[0], v[1]))
    }));
    out.push(Case::new("matmul broadcast + transpose", OP_TOL, |s| {
        let mut r = rng(s);
        let a = randn(&mut r, &[2, 3, 4]);
        let b = randn(&mut r, &[4, 2]);
        let c = randn(&mut r, &[1, 3, 2]);
        let d = randn(&mut r, &[2, 2, 3]);
        check_inputs(&[a, b, c, d], Mode::Eval, s, |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let cd = t.matmul(v[2], v[3])?;
            let cdt = t.transpose_last2(cd)?;
            t.matmul(cdt, ab)
        })
    }));
    out.push(Case::new("softmax", OP_TOL, |s| {
        let x = randn(&mut rng(s), &[5]);
        check_inputs(&[x], Mode::Eval, s, |t, v| t.softmax_lastdim(v[0]))
    }));
    for mode in [Mode::Train, Mode::Eval] {
        out.push(Case::new(format!("batch_norm {mode:?}"), OP_TOL, move |s| {
            let mut stats = StatsStore::<f64>::new();
            let id = stats.add("bn", 3).unwrap();
            let mut r = rng(s);
            let x = randn(&mut r, &[2, 3, 3, 3]);
            let g = randn(&mut r, &[3]);
            let b = randn(&mut r, &[3]);
            check_inputs(&[x, g, b], mode, s, |t, v| t.batch_norm(v[0], v[1], v[2], &stats, id))
        }));
    }
    out.push(Case::new("avg_pool + nearest_up", OP_TOL, |s| {
        let x = randn(&mut rng(s), &[1, 2, 4, 6]);
        check_inputs(&[x], Mode::Eval, s, |t, v| {
            let p = t.avg_pool(v[0], 2, 2)?;
            let q = t.avg_pool(v[0], 1, 2)?;
            let u = t.nearest_up(p, 2, 2)?;
            let w = t.nearest_up(q, 1, 2)?;
            t.add(u, w)
        })
    }));
    out.push(Case::new("mul, add, scale_channels, gelu, relu, scale", OP_TOL, |s| {
        let mut r = rng(s);
        let a = randn(&mut r, &[2, 3, 2, 2]);
        let b = randn(&mut r, &[2, 3, 2, 2]);
        let c = randn(&mut r, &[3, 2, 2]);
        let sv = randn(&mut r, &[3]);
        // Keep relu inputs away from the kink.
        let d = Tensor::new(&[2, 3, 2, 2], randn(&mut r, &[24]).data().iter().map(|v| v + 0.2 * v.signum()).collect())
            .unwrap();
        check_inputs(&[a, b, c, sv, d], Mode::Eval, s, |t, v| {
            let m = t.mul(v[0], v[1])?;
            let add = t.add(m, v[2])?;
            let sc = t.scale_channels(add, v[3])?;
            let g = t.gelu(sc)?;
            let r = t.relu(v[4])?;
            let out = t.add(g, r)?;
            t.scale(out, 0.75)
        })
    }));
    out.push(Case::new(
        "concat, narrow, permute, reshape, transpose, prefix, mean_spatial, sample_scale",
        OP_TOL,
        |s| {
            let mut r = rng(s);
            let a = randn(&mut r, &[2, 3, 4, 2]);
            let b = randn(&mut r, &[2, 1, 4, 2]);
            check_inputs(&[a, b], Mode::Eval, s, |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let n = t.narrow(c, 1, 1, 3)?;
                let p = t.permute(n, &[0, 2, 3, 1])?;
                let rs = t.reshape(p, &[2, 8, 3])?;
                let tr = t.transpose_last2(rs)?;
                let pre = t.prefix(tr, &[2, 2, 5])?;
                let m = t.reshape(pre, &[2, 2, 5, 1])?;
                let ms = t.mean_spatial(m)?;
                let sm = t.sample_scale(ms, vec![0.5, -2.0])?;
                t.softmax_lastdim(sm)
            })
        },
    ));
    out.push(Case::new("cross_entropy", OP_TOL, |s| {
        let x = randn(&mut rng(s), &[3, 5]);
        let labels = [(s % 5) as usize, 2, 4];
        check_inputs(&[x], Mode::Eval, s, move |t, v| t.cross_entropy(v[0], &labels))
    }));
    out
}

/// Replace every parameter with uniform noise so identity/zero inits do not
/// hide gradient bugs.
pub fn randomize(w: &mut Weights<f64>, seed: u64) {
    let mut r = rng(seed ^ 0xabc);
    for p in w.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.random::<f64>() - 0.5;
        }
    }
}

pub fn block_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for mode in [Mode::Train, Mode::Eval] {
        out.push(Case::new(format!("stem {mode:?}"), BLOCK_TOL, move |s| {
            let mut w = Weights::<f64>::new();
            let stem = StemDef::build(&mut Builder::new(&mut w, s), "stem", &[3]).unwrap().resolve(3).unwrap();
            randomize(&mut w, s);
            let x = randn(&mut rng(s), &[2, 3, 8, 8]);
            let (pe, xe) = check_params(&w, &x, mode, s, |t, w, x| stem.forward(t, w, x));
            pe.max(xe)
        }));
        out.push(Case::new(format!("ffn {mode:?}"), BLOCK_TOL, move |s| {
            let mut w = Weights::<f64>::new();
            let ffn = FfnDef::build(&mut Builder::new(&mut w, s), "ffn", &[4], &[2], 1.0)
                .unwrap()
                .resolve(4, 2)
                .unwrap();
            randomize(&mut w, s);
            let x = randn(&mut rng(s), &[2, 4, 3, 3]);
            let (pe, xe) = check_params(&w, &x, mode, s, |t, w, x| ffn.forward(t, w, x));
            pe.max(xe)
        }));
        let geoms = [
            MhsaGeometry::new(2, 2, 2, 2),
            MhsaGeometry::new(2, 2, 4, 4).with_stride(2),
            MhsaGeometry::new(2, 2, 2, 2).with_kv_pool(1, 2),
        ];
        for geom in geoms {
            out.push(Case::new(format!("mhsa {geom:?} {mode:?}"), BLOCK_TOL, move |s| {
                let mut w = Weights::<f64>::new();
                let mhsa = MhsaDef::build(&mut Builder::new(&mut w, s), "attn", &[4], geom, 1.0)
                    .unwrap()
                    .resolve(4)
                    .unwrap();
                randomize(&mut w, s);
                let x = randn(&mut rng(s), &[2, 4, geom.height, geom.width]);
                let (pe, xe) = check_params(&w, &x, mode, s, |t, w, x| mhsa.forward(t, w, x));
                pe.max(xe)
            }));
        }
        out.push(Case::new(format!("dual_path_down {mode:?}"), BLOCK_TOL, move |s| {
            let mut w = Weights::<f64>::new();
            let down = DualPathDownDef::build(&mut Builder::new(&mut w, s), "down", &[3], &[4], 2, 2, 4, 4)
                .unwrap()
                .resolve(3, 4)
                .unwrap();
            randomize(&mut w, s);
            let x = randn(&mut rng(s), &[2, 3, 4, 4]);
            let (pe, xe) = check_params(&w, &x, mode, s, |t, w, x| down.forward(t, w, x));
            pe.max(xe)
        }));
        out.push(Case::new(format!("plain_down {mode:?}"), BLOCK_TOL, move |s| {
            let mut w = Weights::<f64>::new();
            let down = PlainDownDef::build(&mut Builder::new(&mut w, s), "down", &[3], &[4])
                .unwrap()
                .resolve(3, 4)
                .unwrap();
            randomize(&mut w, s);
            let x = randn(&mut rng(s), &[2, 3, 4, 4]);
            let (pe, xe) = check_params(&w, &x, mode, s, |t, w, x| down.forward(t, w, x));
            pe.max(xe)
        }));
    }
    out
}
