#![allow(dead_code)]

use std::collections::BTreeMap;

use gridbound::forecast::TargetPair;
use gridbound::gc::{Direction, GcInputs, GcParams};
use gridbound::grid::{parse_network, RadialNetwork};

/// Substation plus one controllable unity-pf bus behind impedance r + jx pu.
pub fn two_bus(r: f64, x: f64, rating_kw: f64) -> RadialNetwork {
    let text = format!(
        "BASE,base_mva,base_kv\n\
         BASE,1.0,4.16\n\
         BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf\n\
         BUS,0,1,,0,0,1.0\n\
         BUS,1,0,{rating_kw},0,1,1.0\n\
         LINE,from,to,r_pu,x_pu,reg_tapmin,reg_tapmax,reg_step,reg_unidir\n\
         LINE,0,1,{r},{x},,,,\n"
    );
    parse_network(&text).expect("two-bus fixture parses")
}

pub fn single_hour_targets(upper_kw: f64, lower_kw: f64, base_kw: f64) -> BTreeMap<usize, TargetPair> {
    BTreeMap::from([(
        1,
        TargetPair {
            node: 1,
            upper: vec![upper_kw],
            lower: vec![lower_kw],
            base: vec![base_kw],
        },
    )])
}

pub fn gc_inputs(net: &RadialNetwork, targets: BTreeMap<usize, TargetPair>, params: GcParams) -> GcInputs<'_> {
    GcInputs {
        net,
        targets,
        forecasts: BTreeMap::new(),
        horizon: 1,
        taps: vec![0; net.lines.len()],
        params,
    }
}

/// Result of an exhaustive search over the two-bus bound program.
#[derive(Debug, Clone, Copy)]
pub struct GridOptimum {
    pub x_pu: f64,
    pub w: f64,
    pub objective: f64,
}

/// Exhaustive search over (x, w₁) on a uniform grid for the single-hour
/// two-bus bound program, written from the model equations rather than the
/// program builder.
///
/// With w₀ = 1 and bus 1 drawing x + j0, the branch product is
/// W = w₁ + x·z, and the relaxed feasible set is |W|² ≤ w₁. The objective is
/// the band penalty, the projection onto the target, the baseline hinge and
/// the loss regulariser g(w₀ + w₁ − 2 Re W).
pub fn grid_search_two_bus(
    r: f64,
    xl: f64,
    target_pu: f64,
    base_pu: f64,
    dir: Direction,
    p: &GcParams,
    x_range: (f64, f64),
    w_range: (f64, f64),
    step: f64,
) -> GridOptimum {
    let g = r / (r * r + xl * xl);
    let sg = match dir {
        Direction::Upper => 1.0,
        Direction::Lower => -1.0,
    };
    let nx = ((x_range.1 - x_range.0) / step).round() as usize;
    let nw = ((w_range.1 - w_range.0) / step).round() as usize;
    let mut best = GridOptimum {
        x_pu: f64::NAN,
        w: f64::NAN,
        objective: f64::INFINITY,
    };
    for i in 0..=nx {
        let x = x_range.0 + i as f64 * step;
        for j in 0..=nw {
            let w = w_range.0 + j as f64 * step;
            let (wr, wi) = (w + x * r, x * xl);
            if wr * wr + wi * wi > w {
                continue;
            }
            let hi = (w - p.vband.1).max(0.0);
            let lo = (p.vband.0 - w).max(0.0);
            let f = p.lambda_v * (hi * hi + lo * lo)
                + (x - target_pu).powi(2)
                + p.lambda_d * (sg * (base_pu - x)).max(0.0)
                + p.loss_weight * g * (1.0 + w - 2.0 * wr);
            if f < best.objective {
                best = GridOptimum { x_pu: x, w, objective: f };
            }
        }
    }
    best
}

/// Closed-form receiving-end |V|² of a two-bus feeder with sending voltage
/// 1 pu and constant-power load P + jQ (pu): the larger root of
/// u² − (1 − 2(rP + xQ))·u + |z|²(P² + Q²) = 0.
pub fn two_bus_v_sq(r: f64, xl: f64, p: f64, q: f64) -> f64 {
    let b = 1.0 - 2.0 * (r * p + xl * q);
    let c = (r * r + xl * xl) * (p * p + q * q);
    (b + (b * b - 4.0 * c).sqrt()) / 2.0
}
