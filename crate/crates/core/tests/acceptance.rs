//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
//! when a hard criterion fails. Criterion 5 is reported but never gates.

use std::cell::Cell;
use std::time::Instant;

use biot_ddp::decomposition::{
    build_jump, build_restrictions, build_scalings, classify_dofs, partition, ClassifyOptions, PrimalVariant, RestrictionSet,
};
use biot_ddp::fem::{assemble_blocks, check_saddle_inequalities, BlockSystem, FeSpaceSet, LoadSpec, XiElement};
use biot_ddp::harness::{
    discretization_fingerprint, fit_rows, run_case, BcMode, BlackCell, ExperimentConfig, OracleMode, Pattern,
    ResultRow,
};
use biot_ddp::krylov::{pcg, PcgConfig};
use biot_ddp::linalg::{self, SpMat};
use biot_ddp::mesh::build_mesh;
use biot_ddp::precond::{BlockPreconditioner, LambdaVariant};
use biot_ddp::reduced::ReducedOperator;
use faer::Mat;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(cfg: &ExperimentConfig) -> ResultRow {
    run_case(cfg).unwrap_or_else(|e| panic!("case nx={} sub={:?} failed: {e}", cfg.nx, cfg.sub)).row
}

fn spread(v: &[f64]) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo) / lo
}

fn iter_range(rows: &[ResultRow]) -> usize {
    let lo = rows.iter().map(|r| r.iter).min().unwrap();
    let hi = rows.iter().map(|r| r.iter).max().unwrap();
    hi - lo
}

fn elem_name(e: XiElement) -> &'static str {
    match e {
        XiElement::P1 => "p1",
        XiElement::P0 => "p0",
    }
}

fn variant_name(v: PrimalVariant) -> &'static str {
    match v {
        PrimalVariant::Vertex => "vertex",
        PrimalVariant::VertexEdge => "vertex-edge",
    }
}

const ELEMS: [XiElement; 2] = [XiElement::P1, XiElement::P0];
const VARIANTS: [PrimalVariant; 2] = [PrimalVariant::Vertex, PrimalVariant::VertexEdge];

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut cases = 0;
    let mut failures = Vec::new();
    for (nx, sub) in [(8, [2, 2]), (12, [3, 3]), (16, [4, 4])] {
        for bc in [BcMode::NeumannLeft, BcMode::Dirichlet] {
            for elem in ELEMS {
                for primal in VARIANTS {
                    for lambda_pc in [LambdaVariant::Dirichlet, LambdaVariant::Lumped] {
                        for pattern in [Pattern::Uniform, Pattern::Checkerboard] {
                            let cfg = ExperimentConfig {
                                nx,
                                sub,
                                elem,
                                primal,
                                lambda_pc,
                                pattern,
                                bc,
                                black: BlackCell {
                                    e: Some(1e4),
                                    nu: Some(0.3),
                                    alpha: Some(0.5),
                                    kappa: Some(1e-3),
                                },
                                oracle: OracleMode::On,
                                pcg: PcgConfig {
                                    tol: 1e-15,
                                    ..PcgConfig::default()
                                },
                                ..ExperimentConfig::default()
                            };
                            let row = run(&cfg);
                            if row.total_dofs > cfg.oracle_limit {
                                continue;
                            }
                            cases += 1;
                            let err = row.oracle.expect("oracle enabled").max();
                            let name = format!(
                                "nx={nx} sub={}x{} {} {} {} {} {}",
                                sub[0],
                                sub[1],
                                bc.as_str(),
                                elem_name(elem),
                                variant_name(primal),
                                lambda_pc.as_str(),
                                pattern.as_str()
                            );
                            if err > worst {
                                worst = err;
                                worst_case = name.clone();
                            }
                            if !(err <= 1e-7) {
                                failures.push(format!("{name}: {err:.2e}"));
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!(
            "{cases} cases, worst relative field error {worst:.2e} ({worst_case}), {secs:.1} s{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; over 1e-7: {}", failures.join(", "))
            }
        ),
    )
}

struct Built {
    sys: BlockSystem,
    restr: RestrictionSet,
    op: ReducedOperator,
    m: BlockPreconditioner,
}

fn build(cfg: &ExperimentConfig) -> Built {
    let mesh = build_mesh(cfg.nx, cfg.nx, cfg.grid()).unwrap();
    let part = partition(&mesh);
    let spaces = FeSpaceSet::build(&mesh, cfg.elem, cfg.bc.spec()).unwrap();
    let mats = cfg.materials().unwrap();
    let sys = assemble_blocks(&mesh, &spaces, &mats, &LoadSpec::default()).unwrap();
    let cls = classify_dofs(&mesh, &part, &spaces, ClassifyOptions::new(cfg.primal)).unwrap();
    let w = build_scalings(&mats);
    let jump = build_jump(&cls, &w).unwrap();
    let restr = build_restrictions(&part, &spaces, &cls, &w).unwrap();
    let op = ReducedOperator::new(&sys, &cls, jump).unwrap();
    let m = BlockPreconditioner::build(&sys, &cls, &restr, &op, cfg.lambda_pc).unwrap();
    Built {
        sys,
        restr,
        op,
        m,
    }
}

fn reduced_spd() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for elem in ELEMS {
        for primal in VARIANTS {
            let cfg = ExperimentConfig {
                nx: 8,
                sub: [2, 2],
                elem,
                primal,
                ..ExperimentConfig::default()
            };
            let b = build(&cfg);
            let g = b.op.probe().unwrap();
            let asym = (&g - g.transpose()).norm_max() / g.norm_max();
            let ev = linalg::sym_eigenvalues(g.as_ref()).unwrap();
            let ok = asym <= 1e-10 && ev[0] > 0.0;
            pass &= ok;
            details.push(format!(
                "{}/{}: asym {asym:.1e} min eig {:.3e}",
                elem_name(elem),
                variant_name(primal),
                ev[0]
            ));
        }
    }
    outcome(pass, details.join("; "))
}

fn scalability() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut details = Vec::new();
    for primal in VARIANTS {
        let rows: Vec<ResultRow> = [(8, 2), (12, 3), (16, 4)]
            .into_iter()
            .map(|(nx, n)| {
                run(&ExperimentConfig {
                    nx,
                    sub: [n, n],
                    primal,
                    oracle: OracleMode::Off,
                    ..ExperimentConfig::default()
                })
            })
            .collect();
        let eig: Vec<f64> = rows.iter().map(|r| r.eig_min).collect();
        let var = spread(&eig);
        let di = iter_range(&rows);
        let ok = var < 0.10 && di <= 2;
        pass &= ok;
        details.push(format!(
            "{}: eig_min {:?} (spread {:.1}%), iter {:?}",
            variant_name(primal),
            eig.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            100.0 * var,
            rows.iter().map(|r| r.iter).collect::<Vec<_>>()
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 120.0, format!("{}; {secs:.1} s", details.join("; ")))
}

fn quasi_optimality() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut details = Vec::new();
    for primal in VARIANTS {
        let rows: Vec<ResultRow> = [2, 4, 8, 16]
            .into_iter()
            .map(|r| {
                run(&ExperimentConfig {
                    nx: 3 * r,
                    sub: [3, 3],
                    primal,
                    oracle: OracleMode::Off,
                    ..ExperimentConfig::default()
                })
            })
            .collect();
        let fit = fit_rows(&rows).unwrap();
        let eig: Vec<f64> = rows.iter().map(|r| r.eig_min).collect();
        let mean = eig.iter().sum::<f64>() / eig.len() as f64;
        let band = eig.iter().map(|v| (v - mean).abs() / mean).fold(0.0, f64::max);
        let ok = fit.r2 >= 0.9 && band <= 0.15;
        pass &= ok;
        details.push(format!(
            "{}: eig_max {:?} fit C1={:.3} C2={:.3} R2={:.4}, eig_min {:?} (max deviation from mean {:.1}%)",
            variant_name(primal),
            rows.iter().map(|r| format!("{:.3}", r.eig_max)).collect::<Vec<_>>(),
            fit.c1,
            fit.c2,
            fit.r2,
            eig.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            100.0 * band
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 300.0, format!("{}; {secs:.1} s", details.join("; ")))
}

fn table_targets() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (elem, target) in [(XiElement::P1, (28.0, 0.1999, 4.0134)), (XiElement::P0, (22.0, 0.2911, 3.6703))] {
        let cfg = ExperimentConfig {
            nx: 192,
            sub: [16, 16],
            elem,
            primal: PrimalVariant::Vertex,
            oracle: OracleMode::Off,
            ..ExperimentConfig::default()
        };
        let r = run(&cfg);
        let it_ok = (r.iter as f64 - target.0).abs() <= 0.2 * target.0;
        let min_ok = (r.eig_min - target.1).abs() <= 0.05;
        let max_ok = (r.eig_max - target.2).abs() <= 0.25 * target.2;
        pass &= it_ok && min_ok && max_ok;
        details.push(format!(
            "{}: iter {} vs {} [{}], eig_min {:.4} vs {} [{}], eig_max {:.4} vs {} [{}]; fingerprint: {}",
            elem_name(elem),
            r.iter,
            target.0,
            if it_ok { "ok" } else { "off" },
            r.eig_min,
            target.1,
            if min_ok { "ok" } else { "off" },
            r.eig_max,
            target.2,
            if max_ok { "ok" } else { "off" },
            discretization_fingerprint(&cfg)
        ));
    }
    outcome(pass, details.join(" | "))
}

fn jump_robustness() -> Outcome {
    let base = ExperimentConfig {
        nx: 16,
        sub: [4, 4],
        e: 1.0,
        nu: 0.49,
        pattern: Pattern::Checkerboard,
        oracle: OracleMode::Off,
        ..ExperimentConfig::default()
    };
    let alpha_rows: Vec<ResultRow> = [1e-2, 1e-6, 1e-10]
        .into_iter()
        .map(|a| {
            run(&ExperimentConfig {
                black: BlackCell {
                    alpha: Some(a),
                    ..BlackCell::default()
                },
                ..base.clone()
            })
        })
        .collect();
    let di = iter_range(&alpha_rows);
    let dmin = alpha_rows.iter().map(|r| (r.eig_min - alpha_rows[0].eig_min).abs()).fold(0.0, f64::max);
    let dmax = alpha_rows.iter().map(|r| (r.eig_max - alpha_rows[0].eig_max).abs()).fold(0.0, f64::max);
    let alpha_ok = di <= 2 && dmin <= 1e-3 && dmax <= 1e-3;

    let uniform = run(&base.clone());
    let kappa_rows: Vec<ResultRow> = [1e-1, 1e-5, 1e-9]
        .into_iter()
        .map(|k| {
            run(&ExperimentConfig {
                black: BlackCell {
                    kappa: Some(k),
                    ..BlackCell::default()
                },
                ..base.clone()
            })
        })
        .collect();
    let worst = kappa_rows.iter().map(|r| r.iter).max().unwrap();
    let kappa_ok = worst as f64 <= 1.5 * uniform.iter as f64;
    outcome(
        alpha_ok && kappa_ok,
        format!(
            "alpha: iter {:?}, eig_min spread {dmin:.1e}, eig_max spread {dmax:.1e}; kappa: uniform iter {}, checkerboard iter {:?}",
            alpha_rows.iter().map(|r| r.iter).collect::<Vec<_>>(),
            uniform.iter,
            kappa_rows.iter().map(|r| r.iter).collect::<Vec<_>>()
        ),
    )
}

fn incompressible_limit() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for elem in ELEMS {
        let rows: Vec<ResultRow> = [0.49, 0.4999, 0.49999]
            .into_iter()
            .map(|nu| {
                run(&ExperimentConfig {
                    nx: 16,
                    sub: [4, 4],
                    elem,
                    nu,
                    bc: BcMode::Dirichlet,
                    oracle: OracleMode::Off,
                    ..ExperimentConfig::default()
                })
            })
            .collect();
        let raw: Vec<f64> = rows.iter().map(|r| r.eig_min).collect();
        let monotone = raw.windows(2).all(|w| w[1] < w[0]);
        let v0 = rows[0].valid_eig_min;
        let valid_ok = rows.iter().all(|r| (r.valid_eig_min - v0).abs() <= 0.2 * v0);
        let growth = rows.iter().map(|r| r.iter).max().unwrap() as i64 - rows[0].iter as i64;
        let ok = monotone && valid_ok && growth <= 15;
        pass &= ok;
        details.push(format!(
            "{}: raw eig_min {:?} [{}], valid {:?} [{}], iter {:?}",
            elem_name(elem),
            raw.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            if monotone { "monotone" } else { "not monotone" },
            rows.iter().map(|r| format!("{:.4}", r.valid_eig_min)).collect::<Vec<_>>(),
            if valid_ok { "ok" } else { "off" },
            rows.iter().map(|r| r.iter).collect::<Vec<_>>()
        ));
    }
    outcome(pass, details.join("; "))
}

fn identity_defect(a: &SpMat, b: &SpMat) -> f64 {
    // ‖aᵀ b − I‖_max
    let p = linalg::to_dense(a).transpose() * linalg::to_dense(b);
    (&p - Mat::<f64>::identity(p.nrows(), p.ncols())).norm_max()
}

fn jump_defect(b: &Built) -> f64 {
    let bm = linalg::to_dense(&b.op.jump.matrix());
    let bd = linalg::to_dense(&b.op.jump.scaled_matrix());
    let p = &bm * bd.transpose();
    (&p - Mat::<f64>::identity(p.nrows(), p.ncols())).norm_max()
}

fn transfer_defects(b: &Built) -> [f64; 4] {
    let r = &b.restr;
    [
        if r.r_xi.nrows() == 0 { 0.0 } else { identity_defect(&r.r_xi_d, &r.r_xi) },
        identity_defect(&r.r_p_d, &r.r_p),
        identity_defect(&r.r_p_tilde_d, &r.r_p_tilde),
        jump_defect(b),
    ]
}

fn property_suites() -> Outcome {
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    // coercivity of the pressure form on random vectors
    let mut min_ratio = f64::INFINITY;
    for (elem, pattern, bc) in [
        (XiElement::P1, Pattern::Uniform, BcMode::NeumannLeft),
        (XiElement::P0, Pattern::Checkerboard, BcMode::NeumannLeft),
        (XiElement::P1, Pattern::Checkerboard, BcMode::Dirichlet),
    ] {
        let cfg = ExperimentConfig {
            nx: 8,
            sub: [2, 2],
            elem,
            pattern,
            bc,
            black: BlackCell {
                e: Some(1e2),
                nu: Some(0.3),
                alpha: Some(0.5),
                kappa: Some(1e-2),
            },
            ..ExperimentConfig::default()
        };
        let rep = check_saddle_inequalities(&build(&cfg).sys, 1000, 17);
        min_ratio = min_ratio.min(rep.min_ratio);
        if rep.violations > 0 || rep.min_ratio < 1.0 {
            failures.push(format!("coercivity ratio {:.4}", rep.min_ratio));
        }
    }
    notes.push(format!("coercivity min ratio {min_ratio:.4} over 3000 vectors"));

    // partition of unity, transfer and jump identities over random grids and coefficients
    let mut runner = TestRunner::new(PtConfig {
        cases: 24,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let strategy = (
        2usize..=3,
        2usize..=3,
        1usize..=2,
        prop::bool::ANY,
        prop::bool::ANY,
        prop::bool::ANY,
        -3.0f64..3.0,
        -3.0f64..3.0,
    );
    let worst = Cell::new(0.0f64);
    let identities = runner.run(&strategy, |(sx, sy, r, p0, edge, dirichlet, le, lk)| {
        let cfg = ExperimentConfig {
            nx: 2 * r * sx * sy,
            sub: [sx, sy],
            elem: if p0 { XiElement::P0 } else { XiElement::P1 },
            primal: if edge {
                PrimalVariant::VertexEdge
            } else {
                PrimalVariant::Vertex
            },
            bc: if dirichlet { BcMode::Dirichlet } else { BcMode::NeumannLeft },
            pattern: Pattern::Checkerboard,
            nu: 0.3,
            black: BlackCell {
                e: Some(1e6 * 10f64.powf(le)),
                kappa: Some(10f64.powf(lk)),
                ..BlackCell::default()
            },
            ..ExperimentConfig::default()
        };
        let b = build(&cfg);
        let d = transfer_defects(&b);
        let m = d.iter().copied().fold(0.0, f64::max);
        worst.set(worst.get().max(m));
        prop_assert!(m <= 1e-14, "identity defects {d:?} for {:?}", cfg.sub);
        Ok(())
    });
    if let Err(e) = identities {
        failures.push(format!("identities: {e}"));
    }
    notes.push(format!("transfer and jump identity defect {:.1e} over 24 random decompositions", worst.get()));

    // Ritz extremes and subsystem bounds on probed cases
    let mut ritz_err = 0.0f64;
    let mut ritz_err_problem = 0.0f64;
    let mut sub_min = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // the interface blocks differ in scale by ~1/μ, so the extremes settle only
    // once every block has converged
    let exhaustive = |n: usize| PcgConfig {
        tol: 1e-20,
        max_iter: n,
        reorthogonalize: true,
        ..PcgConfig::default()
    };
    for pattern in [Pattern::Uniform, Pattern::Checkerboard] {
        for elem in ELEMS {
            for primal in VARIANTS {
                for lambda_pc in [LambdaVariant::Dirichlet, LambdaVariant::Lumped] {
                    let cfg = ExperimentConfig {
                        nx: 8,
                        sub: [2, 2],
                        elem,
                        primal,
                        lambda_pc,
                        pattern,
                        black: BlackCell {
                            e: Some(1e4),
                            kappa: Some(1e-2),
                            ..BlackCell::default()
                        },
                        ..ExperimentConfig::default()
                    };
                    let b = build(&cfg);
                    let g = b.op.probe().unwrap();
                    let m = b.m.probe().unwrap();
                    let ev = linalg::preconditioned_spectrum(m.as_ref(), g.as_ref()).unwrap();
                    let (lo_d, hi_d) = (ev[0], ev[ev.len() - 1]);
                    let rel = |r: &biot_ddp::krylov::PcgResult| {
                        ((r.eig_min - lo_d).abs() / lo_d).max((r.eig_max - hi_d).abs() / hi_d)
                    };
                    let random: Vec<f64> = (0..g.nrows()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let res = pcg(&b.op, &b.m, &random, &exhaustive(g.nrows())).unwrap();
                    let e = rel(&res);
                    ritz_err = ritz_err.max(e);
                    if e > 1e-4 {
                        failures.push(format!(
                            "ritz {}/{}/{}/{}: ({:.6}, {:.6}) vs ({:.6}, {:.6})",
                            pattern.as_str(),
                            elem_name(elem),
                            variant_name(primal),
                            lambda_pc.as_str(),
                            res.eig_min,
                            res.eig_max,
                            lo_d,
                            hi_d
                        ));
                    }
                    let problem = pcg(&b.op, &b.m, &b.op.rhs().unwrap(), &exhaustive(g.nrows())).unwrap();
                    ritz_err_problem = ritz_err_problem.max(rel(&problem));

                    if let Some(xi) = &b.m.xi {
                        let mx = linalg::probe(b.m.layout.n_xi, |x, y| xi.apply(x, y));
                        let s = linalg::preconditioned_spectrum(mx.as_ref(), xi.assembled().as_ref()).unwrap();
                        sub_min = sub_min.min(s[0]);
                    }
                    let mp = linalg::probe(b.m.layout.n_p, |x, y| b.m.p.apply(x, y));
                    let s = linalg::preconditioned_spectrum(mp.as_ref(), b.m.p.assembled().as_ref()).unwrap();
                    sub_min = sub_min.min(s[0]);
                }
            }
        }
    }
    if sub_min < 0.5 - 1e-10 {
        failures.push(format!("subsystem eigenvalue {sub_min:.6} below 1/2"));
    }
    notes.push(format!(
        "Ritz extremes within {ritz_err:.1e} relative of the dense spectrum over 16 cases \
         (load right-hand side, not gated: {ritz_err_problem:.1e})"
    ));
    notes.push(format!("smallest subsystem eigenvalue {sub_min:.4}"));

    let pass = failures.is_empty();
    if !pass {
        notes.extend(failures);
    }
    outcome(pass, notes.join("; "))
}

fn main() {
    let criteria: [(&str, bool, fn() -> Outcome); 8] = [
        ("1 oracle equivalence", true, oracle_equivalence),
        ("2 reduced operator SPD", true, reduced_spd),
        ("3 scalability", true, scalability),
        ("4 quasi-optimality", true, quasi_optimality),
        ("5 table targets (soft)", false, table_targets),
        ("6 jump robustness", true, jump_robustness),
        ("7 incompressible limit", true, incompressible_limit),
        ("8 property suites", true, property_suites),
    ];
    let mut hard_failures = 0;
    for (name, hard, check) in criteria {
        let o = check();
        let tag = match (o.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported only)",
        };
        println!("{tag} criterion {name}: {}", o.detail);
        if hard && !o.pass {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
