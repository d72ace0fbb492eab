use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_rational::BigRational;
use proptest::prelude::*;

use ragglom::affinity::check_reducibility;
use ragglom::agglomerate::{
    agglomerate_chunk, agglomerate_generic, agglomerate_generic_observed, audit_frozen_reachability,
    MaxAffinityQueue, PopAction, RunTrace,
};
use ragglom::datagen::{generate, AffinityModel, BoxLayout, ObjectModel, SyntheticSpec};
use ragglom::format::{decode_dendrogram, decode_frozen, decode_leaf, encode_dendrogram, encode_frozen, encode_leaf};
use ragglom::graph::edge_rank;
use ragglom::octree::{agglomerate_recursive, combine_edges, load_global, ChunkGraph, PlanParams, TaskPlan};
use ragglom::segmentation::{compare, Verdict};
use ragglom::{AffinityStat, Dendrogram, EdgeKey, FixedAffinity, LinkageKind, MergeRow, RegionGraph, SegmentId};

fn kind() -> impl Strategy<Value = LinkageKind> {
    prop_oneof![Just(LinkageKind::Mean), Just(LinkageKind::Max)]
}

fn stat(kind: LinkageKind) -> impl Strategy<Value = AffinityStat> {
    (0u32..=1_000_000, 1u64..1000).prop_map(move |(v, c)| match kind {
        LinkageKind::Mean => AffinityStat::from_parts(kind, u128::from(v) * u128::from(c), c).unwrap(),
        LinkageKind::Max => AffinityStat::from_parts(kind, u128::from(v), c).unwrap(),
    })
}

fn id(v: u64) -> SegmentId {
    SegmentId::new(v).unwrap()
}

/// Random connected-ish sparse graph on `1..=n` with per-edge (value, count).
fn graph(kind: LinkageKind, max_nodes: u64) -> impl Strategy<Value = RegionGraph> {
    (2..=max_nodes).prop_flat_map(move |n| {
        prop::collection::vec((1..=n, 1..=n, 0u32..=1_000_000, 1u64..20), 1..(4 * n as usize)).prop_map(
            move |edges| {
                let mut g = RegionGraph::new();
                for v in 1..=n {
                    g.add_node(id(v));
                }
                for (a, b, v, c) in edges {
                    if a != b {
                        let s = AffinityStat::new(kind, FixedAffinity::new(v).unwrap(), c).unwrap();
                        g.add_edge(EdgeKey::new(id(a), id(b)).unwrap(), s, kind);
                    }
                }
                g
            },
        )
    })
}

fn ratio(s: &AffinityStat) -> BigRational {
    BigRational::new(BigUint::from(s.sum()).into(), BigUint::from(s.count()).into())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn combine_is_commutative_and_associative(k in kind(), a in stat(LinkageKind::Mean), b in stat(LinkageKind::Mean), c in stat(LinkageKind::Mean)) {
        let re = |s: AffinityStat| AffinityStat::from_parts(k, if k == LinkageKind::Max { s.sum() / u128::from(s.count()) } else { s.sum() }, s.count()).unwrap();
        let (a, b, c) = (re(a), re(b), re(c));
        prop_assert_eq!(a.combine(k, b), b.combine(k, a));
        prop_assert_eq!(a.combine(k, b).combine(k, c), a.combine(k, b.combine(k, c)));
    }

    #[test]
    fn mean_compare_matches_rational_oracle(sa in 0u128..(1u128 << 100), ca in 1u64.., sb in 0u128..(1u128 << 100), cb in 1u64..) {
        let k = LinkageKind::Mean;
        let sa = sa.min(u128::from(ca) * 1_000_000);
        let sb = sb.min(u128::from(cb) * 1_000_000);
        let a = AffinityStat::from_parts(k, sa, ca).unwrap();
        let b = AffinityStat::from_parts(k, sb, cb).unwrap();
        prop_assert_eq!(a.compare(k, &b), ratio(&a).cmp(&ratio(&b)));
        let t = FixedAffinity::new((sb % 1_000_001) as u32).unwrap();
        let tr = BigRational::new(BigUint::from(t.get()).into(), BigUint::from(1u32).into());
        prop_assert_eq!(a.reaches(k, t), ratio(&a) >= tr);
    }

    #[test]
    fn merged_mean_lies_between_parts(a in stat(LinkageKind::Mean), b in stat(LinkageKind::Mean)) {
        let k = LinkageKind::Mean;
        let m = a.combine(k, b);
        let (lo, hi) = if a.compare(k, &b) == Ordering::Less { (a, b) } else { (b, a) };
        prop_assert_ne!(m.compare(k, &lo), Ordering::Less);
        prop_assert_ne!(m.compare(k, &hi), Ordering::Greater);
    }

    #[test]
    fn reducibility_holds(k in kind(), ij in stat(LinkageKind::Mean), ik in stat(LinkageKind::Mean), jk in stat(LinkageKind::Mean)) {
        let re = |s: AffinityStat| AffinityStat::from_parts(k, if k == LinkageKind::Max { s.sum() / u128::from(s.count()) } else { s.sum() }, s.count()).unwrap();
        prop_assert!(check_reducibility(k, &re(ij), &re(ik), &re(jk)));
    }

    #[test]
    fn queue_pops_like_a_sorted_model(k in kind(), ops in prop::collection::vec((0u8..3, 1u64..12, 1u64..12, 0u32..50), 1..200)) {
        let mut q = MaxAffinityQueue::new(k);
        let mut model: BTreeMap<EdgeKey, AffinityStat> = BTreeMap::new();
        for (op, a, b, v) in ops {
            if a == b { continue; }
            let key = EdgeKey::new(id(a), id(b)).unwrap();
            match op {
                0 => {
                    let s = AffinityStat::new(k, FixedAffinity::new(v).unwrap(), 1).unwrap();
                    q.push(key, s);
                    model.insert(key, s);
                }
                1 => {
                    q.remove(&key);
                    model.remove(&key);
                }
                _ => {
                    let want = model.iter().max_by(|x, y| edge_rank(k, (x.1, x.0), (y.1, y.0))).map(|(k, s)| (*k, *s));
                    if let Some((wk, _)) = want { model.remove(&wk); }
                    prop_assert_eq!(q.pop(), want);
                }
            }
            prop_assert_eq!(q.len(), model.len());
        }
    }

    #[test]
    fn every_generic_merge_is_a_mutual_best_edge(k in kind(), g in graph(LinkageKind::Mean, 40), t in 0u32..=1_000_000) {
        // Rebuild for the drawn linkage.
        let mut h = RegionGraph::new();
        for n in g.nodes() { h.add_node(n); }
        for (key, s) in g.sorted_edges() {
            let v = (s.sum() / u128::from(s.count())) as u32;
            h.add_edge(key, AffinityStat::new(k, FixedAffinity::new(v).unwrap(), s.count()).unwrap(), k);
        }
        let mut ok = true;
        let mut check = |gr: &RegionGraph, _: &_, key: EdgeKey, s: AffinityStat, a: PopAction| {
            if let PopAction::Merge { .. } = a {
                for end in [key.lo(), key.hi()] {
                    for &nb in gr.neighbors(end) {
                        let other = gr.stat(&EdgeKey::new(end, nb).unwrap()).unwrap();
                        ok &= other.compare(k, &s) != Ordering::Greater;
                    }
                }
            }
        };
        let d = agglomerate_generic_observed(&mut h, k, FixedAffinity::new(t).unwrap(), &mut check);
        prop_assert!(ok);
        prop_assert!(d.audit().is_ok());
        prop_assert!(h.audit_consistency().is_ok());
        // Rows come out in non-increasing order.
        for w in d.rows.windows(2) {
            prop_assert_ne!(w[0].stat.compare(k, &w[1].stat), Ordering::Less);
        }
        for r in &d.rows {
            prop_assert!(r.stat.reaches(k, FixedAffinity::new(t).unwrap()));
        }
    }

    #[test]
    fn chunk_without_boundary_is_generic(k in kind(), g in graph(LinkageKind::Mean, 60), t in 0u32..=1_000_000) {
        let mut h = RegionGraph::new();
        for n in g.nodes() { h.add_node(n); }
        for (key, s) in g.sorted_edges() {
            let v = (s.sum() / u128::from(s.count())) as u32;
            h.add_edge(key, AffinityStat::new(k, FixedAffinity::new(v).unwrap(), s.count()).unwrap(), k);
        }
        let t = FixedAffinity::new(t).unwrap();
        let generic = agglomerate_generic(&mut h.clone(), k, t);
        let chunk = agglomerate_chunk(&mut h, &[], k, t);
        prop_assert_eq!(&generic.rows, &chunk.dendrogram.rows);
        prop_assert!(chunk.frozen_graph.is_empty());
    }

    #[test]
    fn frozen_segments_trace_back_to_the_boundary(k in kind(), g in graph(LinkageKind::Mean, 40), t in 0u32..=1_000_000, picks in prop::collection::vec(1u64..40, 0..6)) {
        let mut g = g;
        let boundary: Vec<SegmentId> = picks.into_iter().map(id).filter(|s| g.contains_node(*s)).collect();
        let (out, trace) = RunTrace::record(&mut g, &boundary, k, FixedAffinity::new(t).unwrap());
        prop_assert!(audit_frozen_reachability(&trace));
        for n in out.frozen_graph.nodes() {
            prop_assert!(out.frozen.contains(&n));
        }
        // No merged pair ever involves a frozen segment.
        for r in &out.dendrogram.rows {
            prop_assert!(!out.frozen.contains(&r.absorbed));
        }
    }

    #[test]
    fn combine_edges_ignores_child_order(k in kind(), parts in prop::collection::vec(graph(LinkageKind::Mean, 12), 2..5), rot in 0usize..5) {
        let fold = |order: &[RegionGraph]| {
            let mut acc = RegionGraph::new();
            for p in order {
                let mut q = RegionGraph::new();
                for n in p.nodes() { q.add_node(n); }
                for (key, s) in p.sorted_edges() {
                    let v = (s.sum() / u128::from(s.count())) as u32;
                    q.add_edge(key, AffinityStat::new(k, FixedAffinity::new(v).unwrap(), s.count()).unwrap(), k);
                }
                combine_edges(&mut acc, &q, k);
            }
            (acc.sorted_nodes(), acc.sorted_edges())
        };
        let mut rotated = parts.clone();
        rotated.rotate_left(rot % parts.len());
        rotated.reverse();
        prop_assert_eq!(fold(&parts), fold(&rotated));
    }

    #[test]
    fn dendrogram_and_frozen_round_trip(k in kind(), g in graph(LinkageKind::Mean, 30), rows in prop::collection::vec((1u64..1000, 1u64..1000, 0u32..=1_000_000, 1u64..50), 0..50)) {
        let mut d = Dendrogram::new(k, FixedAffinity::new(123_456).unwrap());
        for (a, b, v, c) in rows {
            d.rows.push(MergeRow { survivor: id(a), absorbed: id(b), stat: AffinityStat::new(k, FixedAffinity::new(v).unwrap(), c).unwrap() });
        }
        let p = std::path::Path::new("mem");
        prop_assert_eq!(decode_dendrogram(&encode_dendrogram(&d), p).unwrap(), d);

        let mut cg = ChunkGraph::default();
        for n in g.nodes() {
            cg.graph.add_node(n);
            let v = n.get() as u32;
            cg.extents.insert(n, ragglom::octree::Box3::new([v, 0, 0], [v + 1, 2, 3]).unwrap());
        }
        for (key, s) in g.sorted_edges() {
            let v = (s.sum() / u128::from(s.count())) as u32;
            cg.graph.add_edge(key, AffinityStat::new(k, FixedAffinity::new(v).unwrap(), s.count()).unwrap(), k);
        }
        let bytes = encode_frozen(k, &cg);
        let (k2, back) = decode_frozen(&bytes, p).unwrap();
        prop_assert_eq!(k2, k);
        prop_assert_eq!(back.graph.sorted_edges(), cg.graph.sorted_edges());
        prop_assert_eq!(back.graph.sorted_nodes(), cg.graph.sorted_nodes());
        prop_assert_eq!(&back.extents, &cg.extents);
        prop_assert_eq!(encode_frozen(k, &back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_octree_shape_matches_the_global_run(
        k in kind(),
        seed in any::<u64>(),
        leaf in prop::array::uniform3(prop_oneof![Just(2u32), Just(3), Just(4)]),
        grid in prop::array::uniform3(1u32..5),
        depth in prop::option::of(0u8..4),
        t in 0u32..=1_000_000,
        ties in any::<bool>(),
    ) {
        let dims = [leaf[0] * grid[0], leaf[1] * grid[1], leaf[2] * grid[2]];
        let cells = dims.map(|d| (d / 2).max(1));
        let mut spec = SyntheticSpec::new(dims, leaf, BoxLayout::Bricks { cells }, seed);
        spec.objects = ObjectModel::Grown { objects: 3.min(cells.iter().product()) };
        if ties {
            spec.affinity = AffinityModel::windows((600_000, 600_004), (400_000, 400_003), 0.2).unwrap();
        }
        let ds = generate(&spec).unwrap();
        let t = FixedAffinity::new(t).unwrap();
        let global = agglomerate_generic(&mut load_global(&ds, k).unwrap(), k, t);
        let plan = TaskPlan::new(&ds, PlanParams { depth, leaf_threshold: 0 }).unwrap();
        let out = agglomerate_recursive(&plan, plan.root(), &ds, k, t).unwrap();
        prop_assert!(out.frozen.graph.is_empty());
        prop_assert_eq!(compare(&global, &out.dendrogram).unwrap().verdict, Verdict::Equal);
    }

    #[test]
    fn leaf_round_trip(seed in any::<u64>()) {
        let mut spec = SyntheticSpec::new([8, 8, 4], [4, 4, 4], BoxLayout::Grid { cells: [3, 3, 2] }, seed);
        spec.objects = ObjectModel::Grown { objects: 4 };
        let ds = generate(&spec).unwrap();
        for leaf in &ds.leaves {
            let bytes = encode_leaf(leaf);
            prop_assert_eq!(&decode_leaf(&bytes, std::path::Path::new("mem")).unwrap(), leaf);
        }
    }
}
