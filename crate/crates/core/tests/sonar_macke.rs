mod common;

use std::collections::BTreeMap;

use common::*;
use vulnkit::graphs::build_call_graph;
use vulnkit::macke::{run_macke, MackeConfig};
use vulnkit::severity::impact_table;
use vulnkit::sonar::{Combiner, Pool, SonarSearcher};
use vulnkit::symex::{explore_with, Budget, ExploreOptions};

#[test]
fn reached_pool_selects_like_coverage_search() {
    let mut reached_selections = 0;
    for name in ALL_FIXTURES {
        let p = fixture(name);
        for target in p.function_names() {
            let mut s = SonarSearcher::new(&p, target, Combiner::Min)
                .unwrap()
                .with_selection_log();
            explore_with(&p, &mut s, &Budget::states(3_000), &ExploreOptions::default());
            for sel in s.selections().iter().filter(|s| s.pool == Pool::Reached) {
                let expected = sel
                    .candidates
                    .iter()
                    .find(|(_, uncovered)| *uncovered)
                    .or(sel.candidates.first())
                    .map(|(id, _)| *id);
                assert_eq!(Some(sel.chosen), expected, "{name} -> {target}");
                reached_selections += 1;
            }
        }
    }
    assert!(reached_selections > 100);
}

#[test]
fn chains_follow_call_edges_and_feed_longest_chain() {
    for name in MACKE_CORPUS {
        let p = fixture(name);
        let cg = build_call_graph(&p);
        let report = run_macke(&p, &MackeConfig::default()).unwrap();
        let mut longest: BTreeMap<_, u64> = BTreeMap::new();
        for c in &report.chains {
            assert_eq!(c.functions.last(), Some(&c.root_location.function), "{name}");
            for w in c.functions.windows(2) {
                assert!(cg.has_edge(&w[0], &w[1]), "{name}: {} does not call {}", w[0], w[1]);
            }
            let e = longest.entry(c.root_location.clone()).or_default();
            *e = (*e).max(c.functions.len() as u64);
        }
        let impacts = impact_table(&p, &report.records, &report.chains);
        for (r, iv) in report.records.iter().zip(impacts) {
            let want = longest.get(&r.root_location).copied().unwrap_or(0);
            assert_eq!(iv.longest_chain, want, "{name}: {}", r.id);
        }
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    for name in MACKE_CORPUS {
        let p = fixture(name);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| serde_json::to_string(&run_macke(&p, &MackeConfig::default()).unwrap()).unwrap())
        };
        assert_eq!(run(1), run(4), "{name}");
    }
}
