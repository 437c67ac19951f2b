use std::collections::HashMap;

use prefixbatch::prefix_tree::{
    build_tree, extract_groups, groups_to_workload, maximize_reuse, optimal_partition_oracle, saved_tokens,
    PrefixTree, TreeNode,
};
use prefixbatch::workload::{Request, Workload};
use proptest::prelude::*;

fn workload_strategy(max_requests: usize, max_len: usize, alphabet: u32) -> impl Strategy<Value = Workload> {
    (1..=alphabet).prop_flat_map(move |a| {
        prop::collection::vec(prop::collection::vec(0..a, 1..=max_len), 1..=max_requests).prop_map(|prompts| {
            Workload::new(
                prompts
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| Request::new(format!("r{i}"), t, 1))
                    .collect(),
            )
            .unwrap()
        })
    })
}

fn check_shape(n: &TreeNode, is_root: bool) -> Result<(), String> {
    if !is_root {
        if n.tokens.is_empty() {
            return Err("empty span below root".into());
        }
        if n.leaves() == 0 {
            return Err("node without leaves".into());
        }
        if n.children.len() == 1 && n.leaf_ids.is_empty() {
            return Err(format!("uncompacted node {:?}", n.tokens));
        }
    }
    let below: usize = n.leaf_ids.len() + n.children.iter().map(TreeNode::leaves).sum::<usize>();
    if below != n.leaves() {
        return Err("cached leaf count is stale".into());
    }
    n.children.iter().try_for_each(|c| check_shape(c, false))
}

fn distinct_first_tokens(n: &TreeNode) -> bool {
    let firsts: Vec<_> = n.children.iter().map(|c| c.tokens[0]).collect();
    firsts.windows(2).all(|w| w[0] < w[1]) && n.children.iter().all(distinct_first_tokens)
}

fn reconstructs(t: &PrefixTree, w: &Workload) -> bool {
    let spelled: HashMap<usize, Vec<u32>> = t.spelled_prompts().into_iter().collect();
    spelled.len() == w.len() && w.requests.iter().enumerate().all(|(i, r)| spelled.get(&i) == Some(&r.tokens))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn built_tree_is_a_radix_tree(w in workload_strategy(10, 12, 4)) {
        let t = build_tree(&w);
        prop_assert!(reconstructs(&t, &w));
        prop_assert_eq!(check_shape(&t.root, true), Ok(()));
        prop_assert!(distinct_first_tokens(&t.root));
    }

    #[test]
    fn insertion_order_does_not_matter(w in workload_strategy(8, 10, 3), seed in any::<u64>()) {
        let shuffled = prefixbatch::workload::shuffle_workload(&w, seed);
        let a = build_tree(&w);
        let b = build_tree(&shuffled);
        let ids = |t: &PrefixTree, w: &Workload| -> Vec<(String, Vec<u32>)> {
            let mut v: Vec<_> = t.spelled_prompts().into_iter().map(|(i, p)| (w.requests[i].id.clone(), p)).collect();
            v.sort();
            v
        };
        prop_assert_eq!(a.node_count(), b.node_count());
        prop_assert_eq!(ids(&a, &w), ids(&b, &shuffled));
        prop_assert_eq!(a.first_level_saved_tokens(), b.first_level_saved_tokens());
    }

    #[test]
    fn enlargement_keeps_prompts_and_never_loses(w in workload_strategy(10, 12, 4)) {
        let t = build_tree(&w);
        let m = maximize_reuse(&t);
        prop_assert!(reconstructs(&m, &w));
        prop_assert_eq!(check_shape(&m.root, true), Ok(()));
        prop_assert!(m.first_level_saved_tokens() >= t.first_level_saved_tokens());
        prop_assert!(t.first_level_saved_tokens() <= t.multi_level_saved_tokens());
    }

    #[test]
    fn enlargement_is_idempotent(w in workload_strategy(10, 12, 4)) {
        let once = maximize_reuse(&build_tree(&w));
        let twice = maximize_reuse(&once);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn groups_partition_the_workload(w in workload_strategy(10, 12, 4)) {
        let t = maximize_reuse(&build_tree(&w));
        let groups = extract_groups(&t, &w);
        let back = groups_to_workload(&groups);
        prop_assert_eq!(back.len(), w.len());
        let mut want: Vec<_> = w.requests.iter().map(|r| (r.id.clone(), r.tokens.clone())).collect();
        let mut got: Vec<_> = back.requests.iter().map(|r| (r.id.clone(), r.tokens.clone())).collect();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
        prop_assert_eq!(saved_tokens(&groups), t.first_level_saved_tokens());
        prop_assert!(groups.iter().all(|g| !g.members.is_empty()));
        prop_assert!(groups.iter().all(|g| g.members.len() > 1 || g.prefix.is_empty()));
    }

    #[test]
    fn enlargement_within_oracle_bounds(w in workload_strategy(8, 12, 4)) {
        let t = build_tree(&w);
        let naive = t.first_level_saved_tokens();
        let dp = saved_tokens(&extract_groups(&maximize_reuse(&t), &w));
        let best = optimal_partition_oracle(&w).unwrap().saved_tokens;
        prop_assert!(naive <= dp, "naive {naive} > dp {dp}");
        prop_assert!(dp <= best, "dp {dp} > oracle {best}");
    }
}
