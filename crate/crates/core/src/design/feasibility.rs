use std::collections::HashMap;

use super::{DesignKind, DesignSpec};

/// Largest local configuration count scanned when proving impossibility.
const LOCAL_CONFIG_CAP: f64 = 4_194_304.0;

/// Whether the base design can put `units` on `arms` simultaneously.
/// `None` when the design kind cannot answer.
fn local_feasible(design: &DesignSpec, units: &[usize], arms: &[usize]) -> Option<bool> {
    match design.kind() {
        DesignKind::Bernoulli { probs } => Some(units.iter().zip(arms).all(|(&u, &a)| probs[u][a] > 0.0)),
        DesignKind::CompletelyRandomized { counts } => {
            let mut used = vec![0usize; counts.len()];
            for &a in arms {
                used[a] += 1;
            }
            Some(used.iter().zip(counts).all(|(u, c)| u <= c))
        }
        DesignKind::Stratified { strata, counts } => {
            let mut stratum_of = HashMap::new();
            for (s, members) in strata.iter().enumerate() {
                for &u in members {
                    stratum_of.insert(u, s);
                }
            }
            let mut used: HashMap<(usize, usize), usize> = HashMap::new();
            for (&u, &a) in units.iter().zip(arms) {
                let s = stratum_of[&u];
                let e = used.entry((s, a)).or_insert(0);
                *e += 1;
                if *e > counts[s][a] {
                    return Some(false);
                }
            }
            Some(true)
        }
        DesignKind::Clustered { cluster_of, cluster_design } => {
            let mut arm_of_cluster: Vec<(usize, usize)> = Vec::new();
            for (&u, &a) in units.iter().zip(arms) {
                let c = cluster_of[u];
                match arm_of_cluster.iter().find(|(cc, _)| *cc == c) {
                    Some(&(_, prev)) if prev != a => return Some(false),
                    Some(_) => {}
                    None => arm_of_cluster.push((c, a)),
                }
            }
            let cl: Vec<usize> = arm_of_cluster.iter().map(|x| x.0).collect();
            let ca: Vec<usize> = arm_of_cluster.iter().map(|x| x.1).collect();
            local_feasible(cluster_design, &cl, &ca)
        }
        DesignKind::ExposureDerived { .. } | DesignKind::Custom { .. } => None,
    }
}

/// kn mask of (arm, unit) cells the design provably never realizes.
/// `None` when impossibility cannot be established for this design kind.
pub fn structural_zeros(design: &DesignSpec) -> Option<Vec<bool>> {
    let n = design.n();
    let k = design.k();
    match design.kind() {
        DesignKind::ExposureDerived { base, graph, rules } => {
            let m = base.k();
            let mut zero = vec![true; k * n];
            for i in 0..n {
                let mut local = vec![i];
                local.extend(graph.neighbors(i, rules.neighborhood()).iter().cloned());
                if (m as f64).powi(local.len() as i32) > LOCAL_CONFIG_CAP {
                    return None;
                }
                let mut cfg = vec![0usize; local.len()];
                loop {
                    if local_feasible(base, &local, &cfg)? {
                        let mut counts = vec![0usize; m];
                        for &a in &cfg[1..] {
                            counts[a] += 1;
                        }
                        if let Ok(e) = rules.classify(cfg[0], &counts) {
                            zero[e * n + i] = false;
                        }
                    }
                    let mut pos = 0;
                    loop {
                        if pos == cfg.len() {
                            break;
                        }
                        cfg[pos] += 1;
                        if cfg[pos] < m {
                            break;
                        }
                        cfg[pos] = 0;
                        pos += 1;
                    }
                    if pos == cfg.len() {
                        break;
                    }
                }
            }
            Some(zero)
        }
        DesignKind::Custom { .. } => None,
        _ => {
            let mut zero = vec![false; k * n];
            for i in 0..n {
                for a in 0..k {
                    zero[a * n + i] = !local_feasible(design, &[i], &[a])?;
                }
            }
            Some(zero)
        }
    }
}
