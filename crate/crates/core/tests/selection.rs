mod common;

use std::collections::BTreeSet;

use recycle_core::eft::EftConfig;
use recycle_core::select::{knn_accuracy, rank_scores, select_top_m, ModelScore, SelectionConfig};
use recycle_core::source::{train_source, SourceModelRecord};
use recycle_core::task::{family_task, gen_overlap_suite, ImageBank, SuiteDims, TaskSpec};

use common::{desk, quick};

fn source(task: &TaskSpec, id: u32, epochs: usize) -> SourceModelRecord {
    let (mut r, _) = train_source(task, &desk(), EftConfig::DESK, &quick(epochs)).unwrap();
    r.id = id;
    r
}

#[test]
fn related_family_scores_higher_and_ranks_first() {
    let bank = ImageBank::new(7, 3);
    let dims = SuiteDims::default();
    let bb = desk();
    let sources = [
        source(&family_task(&bank, 0, 0, &dims, 7).unwrap(), 0, 15),
        source(&family_task(&bank, 1, 0, &dims, 7).unwrap(), 1, 15),
    ];
    for fam in 0..2u32 {
        let target = family_task(&bank, fam, 50, &dims, 7).unwrap();
        let within = knn_accuracy(&sources[fam as usize], &bb, &target, 5).unwrap();
        let across = knn_accuracy(&sources[1 - fam as usize], &bb, &target, 5).unwrap();
        assert!(within > across + 0.1, "family {fam}: {within} vs {across}");

        let refs: Vec<&SourceModelRecord> = sources.iter().collect();
        let cfg = SelectionConfig { m: 2, ..SelectionConfig::default() };
        let report = select_top_m(&refs, |_| Ok(&bb), &target, &cfg).unwrap();
        assert_eq!(report.ranked, vec![fam, 1 - fam]);
        assert_eq!(report.selected.len(), 2);
    }
}

#[test]
fn full_ranking_breaks_ties_by_id() {
    let scores = vec![
        ModelScore { model_id: 3, knn_acc: 0.4 },
        ModelScore { model_id: 1, knn_acc: 0.8 },
        ModelScore { model_id: 0, knn_acc: 0.4 },
        ModelScore { model_id: 2, knn_acc: 0.9 },
    ];
    let r = rank_scores(scores, 5, 4).unwrap();
    assert_eq!(r.ranked, vec![2, 1, 0, 3]);
    assert_eq!(r.selected, r.ranked);
    assert_eq!(r.ties.len(), 1);
    assert_eq!(r.ties[0].model_ids, vec![0, 3]);
    assert!(rank_scores(vec![ModelScore { model_id: 0, knn_acc: 1.0 }], 5, 2).is_err());
}

#[test]
fn overlap_suite_has_forty_five_class_tasks() {
    let a = gen_overlap_suite(40, 5, 11).unwrap();
    let b = gen_overlap_suite(40, 5, 11).unwrap();
    assert_eq!(a.len(), 40);
    let mut uses = std::collections::BTreeMap::new();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.num_classes(), 5);
        assert_eq!(serde_json::to_vec(&x.manifest).unwrap(), serde_json::to_vec(&y.manifest).unwrap());
        for c in &x.manifest.classes {
            *uses.entry(c.class).or_insert(0) += 1;
        }
    }
    assert!(uses.values().all(|&u| u <= 2));
    assert!(uses.values().any(|&u| u == 2));
}

fn shares_class(a: &TaskSpec, b: &TaskSpec) -> bool {
    let ca: BTreeSet<u32> = a.manifest.classes.iter().map(|c| c.class).collect();
    b.manifest.classes.iter().any(|c| ca.contains(&c.class))
}

/// Top-1 picks share a class with the target more often than a uniformly
/// random pick would.
#[test]
fn tasks_sharing_classes_get_picked() {
    let suite = gen_overlap_suite(16, 5, 5).unwrap();
    let (pool_tasks, targets) = suite.split_at(10);
    let bb = desk();
    let pool: Vec<SourceModelRecord> = pool_tasks.iter().enumerate().map(|(i, t)| source(t, i as u32, 20)).collect();
    let refs: Vec<&SourceModelRecord> = pool.iter().collect();
    let mut hits = 0.0;
    let mut chance = 0.0;
    for t in targets {
        let sharing = pool_tasks.iter().filter(|p| shares_class(p, t)).count();
        chance += sharing as f64 / pool_tasks.len() as f64;
        let report = select_top_m(&refs, |_| Ok(&bb), t, &SelectionConfig::default()).unwrap();
        if shares_class(&pool_tasks[report.selected[0] as usize], t) {
            hits += 1.0;
        }
    }
    assert!(chance > 0.0);
    assert!(hits > chance, "{hits} hits vs {chance:.2} expected by chance");
}
