//! Bundled networks.
//!
//! [`desk_network`] is the five-intersection arterial used by the acceptance
//! suite and the CLI examples: phase counts (5, 3, 2, 2, 2), a tidal demand
//! pattern on the arterial, and a deliberately poor starting plan with equal
//! splits and an overlong cycle. The small builders are used by tests.

use crate::plan::{IntersectionSpec, PhaseSpec, SignalPlan};
use crate::sim::{ArrivalMode, Demand, Link, Movement, NetworkSpec, Share, TurnRatios};

/// Starting cycle of the desk scenario, seconds.
pub const DESK_INITIAL_CYCLE: u32 = 200;
const DESK_SAMPLING_LEN: u32 = 2;

struct Builder {
    links: Vec<Link>,
    movements: Vec<Movement>,
    demand: Vec<Demand>,
    turn_ratios: Vec<TurnRatios>,
}

impl Builder {
    fn new() -> Self {
        Builder { links: vec![], movements: vec![], demand: vec![], turn_ratios: vec![] }
    }

    fn link(&mut self, capacity: u64, travel_steps: usize) -> usize {
        let id = self.links.len();
        self.links.push(Link { id, capacity, travel_steps });
        id
    }

    fn movement(&mut self, from_link: usize, to_link: Option<usize>, saturation_flow: u64) -> usize {
        let id = self.movements.len();
        self.movements.push(Movement { id, from_link, to_link, saturation_flow });
        id
    }

    fn split(&mut self, link: usize, shares: &[(usize, f64)]) {
        self.turn_ratios.push(TurnRatios {
            link,
            shares: shares.iter().map(|&(movement, share)| Share { movement, share }).collect(),
        });
    }

    fn demand(&mut self, link: usize, rate: f64, profile: Vec<f64>, period_steps: u64) {
        self.demand.push(Demand { link, rate, profile, period_steps });
    }
}

fn phase(movements: Vec<usize>, max_len: u32) -> PhaseSpec {
    PhaseSpec { min_len: crate::plan::DEFAULT_MIN_LEN, max_len, movements }
}

/// Five intersections along an east-west arterial with side streets.
pub fn desk_network() -> NetworkSpec {
    let max = DESK_INITIAL_CYCLE;
    let n = 5;
    let mut b = Builder::new();

    // Eastbound arterial: entry into 0, then j-1 -> j.
    let eb: Vec<usize> = (0..n).map(|j| if j == 0 { b.link(60, 3) } else { b.link(40, 10) }).collect();
    // Westbound arterial: entry into 4, then j+1 -> j.
    let wb: Vec<usize> = (0..n).map(|j| if j == n - 1 { b.link(60, 3) } else { b.link(40, 10) }).collect();
    let north: Vec<usize> = (0..n).map(|_| b.link(30, 3)).collect();
    let south: Vec<usize> = (0..n).map(|_| b.link(30, 3)).collect();

    let mut eb_thru = vec![];
    let mut eb_left = vec![];
    let mut wb_thru = vec![];
    let mut wb_left = vec![];
    let mut n_mv = vec![];
    let mut s_mv = vec![];
    for j in 0..n {
        let next_e = if j + 1 < n { Some(eb[j + 1]) } else { None };
        let next_w = if j > 0 { Some(wb[j - 1]) } else { None };
        eb_thru.push(b.movement(eb[j], next_e, 2));
        eb_left.push(b.movement(eb[j], None, 1));
        wb_thru.push(b.movement(wb[j], next_w, 2));
        wb_left.push(b.movement(wb[j], None, 1));
        n_mv.push(b.movement(north[j], None, 1));
        s_mv.push(b.movement(south[j], None, 1));
    }
    for j in 0..n {
        b.split(eb[j], &[(eb_thru[j], 0.85), (eb_left[j], 0.15)]);
        b.split(wb[j], &[(wb_thru[j], 0.85), (wb_left[j], 0.15)]);
        b.split(north[j], &[(n_mv[j], 1.0)]);
        b.split(south[j], &[(s_mv[j], 1.0)]);
    }

    // Tidal arterial demand: the heavy direction swaps every 300 s.
    b.demand(eb[0], 0.55, vec![1.3, 0.7], 150);
    b.demand(wb[n - 1], 0.40, vec![0.7, 1.3], 150);
    let side = [(0.15, 0.15), (0.12, 0.10), (0.10, 0.08), (0.08, 0.10), (0.10, 0.10)];
    for j in 0..n {
        b.demand(north[j], side[j].0, vec![], 0);
        b.demand(south[j], side[j].1, vec![], 0);
    }

    let intersections = vec![
        IntersectionSpec {
            id: 0,
            phases: vec![
                phase(vec![eb_thru[0]], max),
                phase(vec![wb_thru[0]], max),
                phase(vec![eb_left[0], wb_left[0]], max),
                phase(vec![n_mv[0]], max),
                phase(vec![s_mv[0]], max),
            ],
        },
        IntersectionSpec {
            id: 1,
            phases: vec![
                phase(vec![eb_thru[1], wb_thru[1]], max),
                phase(vec![eb_left[1], wb_left[1]], max),
                phase(vec![n_mv[1], s_mv[1]], max),
            ],
        },
    ]
    .into_iter()
    .chain((2..n).map(|j| IntersectionSpec {
        id: j,
        phases: vec![
            phase(vec![eb_thru[j], eb_left[j], wb_thru[j], wb_left[j]], max),
            phase(vec![n_mv[j], s_mv[j]], max),
        ],
    }))
    .collect::<Vec<_>>();

    let initial =
        SignalPlan::uniform(&[5, 3, 2, 2, 2], DESK_INITIAL_CYCLE, DESK_SAMPLING_LEN).expect("non-empty shape");
    let spec = NetworkSpec {
        sampling_len: DESK_SAMPLING_LEN,
        horizon: 12,
        seed: 2019,
        arrivals: ArrivalMode::Deterministic,
        intersections,
        links: b.links,
        movements: b.movements,
        demand: b.demand,
        turn_ratios: b.turn_ratios,
        initial_plan: Some(initial),
    };
    spec.validate().expect("bundled network is valid");
    spec
}

/// Equal splits at [`DESK_INITIAL_CYCLE`].
pub fn desk_initial_plan() -> SignalPlan {
    desk_network().initial_plan.expect("desk network carries its initial plan")
}

/// One intersection, two entry approaches `a` and `b` leaving the network,
/// one phase each.
pub fn two_approach_network(rate_a: f64, rate_b: f64, saturation: u64, sampling_len: u32) -> NetworkSpec {
    let mut b = Builder::new();
    let la = b.link(100, 1);
    let lb = b.link(100, 1);
    let ma = b.movement(la, None, saturation);
    let mb = b.movement(lb, None, saturation);
    b.split(la, &[(ma, 1.0)]);
    b.split(lb, &[(mb, 1.0)]);
    if rate_a > 0.0 {
        b.demand(la, rate_a, vec![], 0);
    }
    if rate_b > 0.0 {
        b.demand(lb, rate_b, vec![], 0);
    }
    NetworkSpec {
        sampling_len,
        horizon: 6,
        seed: 1,
        arrivals: ArrivalMode::Deterministic,
        intersections: vec![IntersectionSpec {
            id: 0,
            phases: vec![phase(vec![ma], 120), phase(vec![mb], 120)],
        }],
        links: b.links,
        movements: b.movements,
        demand: b.demand,
        turn_ratios: b.turn_ratios,
        initial_plan: None,
    }
}

fn short(movements: Vec<usize>) -> PhaseSpec {
    PhaseSpec { min_len: 2, max_len: 120, movements }
}

/// Two intersections in series: `a` feeds intersection 0, whose through
/// movement feeds intersection 1. Each intersection has a side approach.
/// Phases may be as short as 2 s so tests can use small cycles.
pub fn corridor_network(rate_main: f64, rate_side: f64, sampling_len: u32) -> NetworkSpec {
    let mut b = Builder::new();
    let main_in = b.link(50, 2);
    let mid = b.link(20, 3);
    let side0 = b.link(40, 1);
    let side1 = b.link(40, 1);
    let thru0 = b.movement(main_in, Some(mid), 2);
    let turn0 = b.movement(main_in, None, 1);
    let thru1 = b.movement(mid, None, 2);
    let s0 = b.movement(side0, None, 1);
    let s1 = b.movement(side1, Some(main_in), 1);
    b.split(main_in, &[(thru0, 0.75), (turn0, 0.25)]);
    b.split(mid, &[(thru1, 1.0)]);
    b.split(side0, &[(s0, 1.0)]);
    b.split(side1, &[(s1, 1.0)]);
    b.demand(main_in, rate_main, vec![], 0);
    b.demand(side0, rate_side, vec![], 0);
    b.demand(side1, rate_side, vec![1.5, 0.5], 20);
    NetworkSpec {
        sampling_len,
        horizon: 6,
        seed: 3,
        arrivals: ArrivalMode::Deterministic,
        intersections: vec![
            IntersectionSpec { id: 0, phases: vec![short(vec![thru0, turn0]), short(vec![s0])] },
            IntersectionSpec { id: 1, phases: vec![short(vec![thru1]), short(vec![s1])] },
        ],
        links: b.links,
        movements: b.movements,
        demand: b.demand,
        turn_ratios: b.turn_ratios,
        initial_plan: None,
    }
}
