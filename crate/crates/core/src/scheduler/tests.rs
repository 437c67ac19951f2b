use super::*;
use crate::prefix_tree::{plan, processed_tokens, GroupMember};
use crate::workload::{generate_microbenchmark, Request, SyntheticSpec};

fn group(prefix: usize, suffixes: &[usize], output: u32, tag: &str) -> PrefixSharingGroup {
    PrefixSharingGroup {
        prefix: vec![7; prefix],
        members: suffixes
            .iter()
            .enumerate()
            .map(|(i, &s)| GroupMember {
                id: format!("{tag}{i}"),
                suffix: vec![8; s],
                output_len: output,
            })
            .collect(),
    }
}

fn workload(prompts: &[(usize, u32)]) -> Workload {
    Workload::new(
        prompts
            .iter()
            .enumerate()
            .map(|(i, &(len, out))| Request::new(format!("r{i}"), (0..len as u32).collect(), out))
            .collect(),
    )
    .unwrap()
}

fn singleton_groups(w: &Workload) -> Vec<PrefixSharingGroup> {
    w.requests
        .iter()
        .map(|r| PrefixSharingGroup {
            prefix: Vec::new(),
            members: vec![GroupMember {
                id: r.id.clone(),
                suffix: r.tokens.clone(),
                output_len: r.output_len,
            }],
        })
        .collect()
}

#[test]
fn order_by_group_ratio() {
    let a = group(100, &[10, 10], 1, "a");
    let b = group(50, &[10], 1, "b");
    assert_eq!(order_groups(&[a, b]), vec![1, 0]);
}

#[test]
fn order_is_stable_on_ties() {
    let gs = vec![group(10, &[5], 1, "a"), group(5, &[10], 1, "b"), group(1, &[1], 1, "c")];
    assert_eq!(order_groups(&gs), vec![2, 0, 1]);
    let same: Vec<_> = (0..400).map(|i| group(2000, &[200; 16], 1, &format!("g{i}-"))).collect();
    assert_eq!(order_groups(&same), (0..400).collect::<Vec<_>>());
}

#[test]
fn config_validation() {
    let mut c = SchedulerConfig::default();
    assert!(c.validate().is_ok());
    c.mem_threshold = Some(c.total_blocks + 1);
    assert!(c.validate().is_err());
    c.mem_threshold = Some(0);
    assert!(c.validate().is_err());
    let c = SchedulerConfig {
        chunk_size: 0,
        ..SchedulerConfig::default()
    };
    assert!(c.validate().is_err());
    assert_eq!("fcfs_cap_lru".parse::<Policy>().unwrap(), Policy::FcfsCapLru);
    assert!("lifo".parse::<Policy>().is_err());
}

#[test]
fn input_must_match_policy() {
    let w = workload(&[(4, 1)]);
    let g = singleton_groups(&w);
    let bl = SchedulerConfig::with_policy(Policy::BatchLlm);
    assert!(matches!(
        Simulator::new(SimInput::Workload(&w), bl),
        Err(SimError::InputMismatch { .. })
    ));
    let fc = SchedulerConfig::with_policy(Policy::FcfsCap);
    assert!(matches!(
        Simulator::new(SimInput::Groups(&g), fc),
        Err(SimError::InputMismatch { .. })
    ));
}

#[test]
fn single_request_four_iterations() {
    let w = workload(&[(10, 3)]);
    let g = singleton_groups(&w);
    let mut sim = Simulator::new(SimInput::Groups(&g), SchedulerConfig::default()).unwrap();
    let first = sim.form_token_batch().unwrap();
    assert_eq!(
        first.entries,
        vec![BatchEntry {
            owner: EntryOwner::Request(0),
            kind: EntryKind::DistinctChunk,
            tokens: 10
        }]
    );
    sim.execute(first);
    let trace = sim.run().unwrap();
    assert_eq!(trace.iteration_count(), 4);
    assert_eq!(trace.total_decode_tokens(), 3);

    let fc = simulate(SimInput::Workload(&w), SchedulerConfig::with_policy(Policy::FcfsCap)).unwrap();
    assert_eq!(fc.iteration_count(), 4);
}

#[test]
fn chunked_prefill_transitions_to_decoding() {
    let w = workload(&[(13, 2)]);
    let g = singleton_groups(&w);
    let config = SchedulerConfig {
        chunk_size: 10,
        ..SchedulerConfig::default()
    };
    let mut sim = Simulator::new(SimInput::Groups(&g), config).unwrap();
    sim.step().unwrap();
    assert_eq!(sim.requests()[0].prefill_done, 10);
    assert_eq!(sim.requests()[0].phase, Phase::Prefilling);
    let row = sim.step().unwrap();
    assert_eq!(row.prefill_tokens, 3);
    assert_eq!(sim.requests()[0].phase, Phase::Decoding);
}

#[test]
fn last_decode_frees_blocks() {
    let w = workload(&[(20, 2)]);
    let mut sim = Simulator::new(SimInput::Workload(&w), SchedulerConfig::with_policy(Policy::FcfsCap)).unwrap();
    sim.step().unwrap();
    sim.step().unwrap();
    assert_eq!(sim.requests()[0].decode_done, 1);
    assert_eq!(sim.kv_blocks(0).len(), 2); // 21 tokens
    let row = sim.step().unwrap();
    assert_eq!(sim.requests()[0].phase, Phase::Done);
    assert!(sim.kv_blocks(0).is_empty());
    assert_eq!(row.blocks_used, 0);
}

#[test]
fn prefix_freed_when_group_completes() {
    // prefix of 32 tokens = 2 blocks; two members, 4-token suffix, output 2
    let g = vec![group(32, &[4, 4], 2, "m")];
    let mut sim = Simulator::new(SimInput::Groups(&g), SchedulerConfig::default()).unwrap();
    let mut rows = Vec::new();
    while !sim.is_finished() {
        rows.push(sim.step().unwrap());
    }
    // it0 prefix, it1 both suffixes, it2 decode 1, it3 decode 2 -> done
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2].blocks_used, 2 + 2);
    let own = 2; // each member: 4 + 2 tokens -> 1 block
    assert_eq!(rows[3].blocks_used, 0);
    assert_eq!(rows[2].blocks_used - rows[3].blocks_used, 2 + own);
    assert_eq!(sim.allocator().prefix_refs(0), 0);
}

#[test]
fn distinct_waits_for_prefix_iteration() {
    let g = vec![group(100, &[5, 5], 1, "m")];
    let config = SchedulerConfig {
        chunk_size: 64,
        ..SchedulerConfig::default()
    };
    let mut sim = Simulator::new(SimInput::Groups(&g), config).unwrap();
    let b0 = sim.form_token_batch().unwrap();
    // block aligned chunk
    assert_eq!(b0.entries[0].tokens, 64);
    sim.execute(b0);
    let b1 = sim.form_token_batch().unwrap();
    assert_eq!(b1.entries.len(), 1);
    assert_eq!(b1.entries[0].kind, EntryKind::PrefixChunk);
    assert_eq!(b1.entries[0].tokens, 36);
    sim.execute(b1);
    let b2 = sim.form_token_batch().unwrap();
    assert!(b2.entries.iter().all(|e| e.kind == EntryKind::DistinctChunk));
    assert_eq!(b2.total_tokens(), 10);
}

#[test]
fn empty_suffix_member_decodes_after_prefix() {
    let g = vec![group(8, &[0, 3], 2, "m")];
    let trace = simulate(SimInput::Groups(&g), SchedulerConfig::default()).unwrap();
    assert_eq!(trace.n_processed_prefill_tokens, 11);
    assert_eq!(trace.n_logical_prefill_tokens, 19);
    assert_eq!(trace.total_decode_tokens(), 4);
}

/// 1000 requests of 8 tokens with long outputs: iteration 0 prefills 256 of
/// them (2048 tokens), so iteration 1 starts with 256 decoding requests.
fn decode_heavy() -> Workload {
    workload(&vec![(8, 1000); 1000])
}

#[test]
fn request_cap_starves_prefill() {
    let w = decode_heavy();
    let mut sim = Simulator::new(SimInput::Workload(&w), SchedulerConfig::with_policy(Policy::FcfsCap)).unwrap();
    let r0 = sim.step().unwrap();
    assert_eq!(r0.prefill_tokens, 2048);
    let b = sim.form_token_batch().unwrap();
    assert_eq!(b.decode_tokens(), 256);
    assert_eq!(b.prefill_tokens(), 0);
}

#[test]
fn memory_centric_batch_fills_chunk() {
    let w = decode_heavy();
    let g = singleton_groups(&w);
    let mut sim = Simulator::new(SimInput::Groups(&g), SchedulerConfig::default()).unwrap();
    sim.step().unwrap();
    let b = sim.form_token_batch().unwrap();
    assert_eq!(b.decode_tokens(), 256);
    assert_eq!(b.total_tokens(), 2048);
}

#[test]
fn memory_threshold_limits_admission() {
    let w = decode_heavy();
    let g = singleton_groups(&w);
    // each request: 8 + 1000 tokens -> 63 blocks
    let config = SchedulerConfig {
        total_blocks: 1000,
        ..SchedulerConfig::default()
    };
    let mut sim = Simulator::new(SimInput::Groups(&g), config).unwrap();
    let row = sim.step().unwrap();
    assert_eq!(row.prefill_tokens, 15 * 8);
}

#[test]
fn unschedulable_request_is_reported() {
    let w = workload(&[(4, 1), (100, 100)]);
    let config = SchedulerConfig {
        total_blocks: 10,
        policy: Policy::FcfsCap,
        ..SchedulerConfig::default()
    };
    match Simulator::new(SimInput::Workload(&w), config) {
        Err(SimError::Unschedulable { id, needed, threshold }) => {
            assert_eq!(id, "r1");
            assert_eq!(needed, 13);
            assert_eq!(threshold, 10);
        }
        other => panic!("expected unschedulable, got {other:?}"),
    }
}

#[test]
fn microbenchmark_matches_static_count() {
    let spec = SyntheticSpec {
        prefix_len: 200,
        distinct_len: 20,
        sharing_degree: 16,
        num_groups: 12,
        output_len: 10,
        seed: 3,
    };
    let w = generate_microbenchmark(&spec).unwrap();
    let groups = plan(&w);
    let trace = simulate(SimInput::Groups(&groups), SchedulerConfig::default()).unwrap();
    assert_eq!(trace.n_processed_prefill_tokens, 12 * (200 + 16 * 20));
    assert_eq!(trace.n_processed_prefill_tokens, processed_tokens(&groups));
    let fc = simulate(SimInput::Workload(&w), SchedulerConfig::with_policy(Policy::FcfsCap)).unwrap();
    assert_eq!(fc.n_processed_prefill_tokens, fc.n_logical_prefill_tokens);
    assert_eq!(fc.workload_fingerprint, trace.workload_fingerprint);
}

#[test]
fn identical_prompts_hit_cache() {
    // 40 tokens = 2 full blocks + 8-token tail
    let tokens: Vec<u32> = (100..140).collect();
    let w = Workload::new(vec![Request::new("a", tokens.clone(), 1), Request::new("b", tokens, 1)]).unwrap();
    let config = SchedulerConfig {
        chunk_size: 40,
        policy: Policy::FcfsCapLru,
        lru_blocks: 16,
        ..SchedulerConfig::default()
    };
    let trace = simulate(SimInput::Workload(&w), config).unwrap();
    assert_eq!(trace.n_processed_prefill_tokens, 40 + 8);
}

#[test]
fn tiny_cache_thrashes() {
    let a: Vec<u32> = (0..32).collect();
    let b: Vec<u32> = (1000..1032).collect();
    let w = Workload::new(vec![
        Request::new("a0", a.clone(), 1),
        Request::new("b0", b.clone(), 1),
        Request::new("a1", a, 1),
        Request::new("b1", b, 1),
    ])
    .unwrap();
    let config = SchedulerConfig {
        chunk_size: 32,
        policy: Policy::FcfsCapLru,
        lru_blocks: 1,
        // one request per batch keeps the four prompts strictly sequential
        request_cap: 1,
        ..SchedulerConfig::default()
    };
    let mut sim = Simulator::new(SimInput::Workload(&w), config).unwrap();
    while !sim.is_finished() {
        sim.step().unwrap();
    }
    assert_eq!(sim.cache().unwrap().hits(), 0);
    assert_eq!(sim.n_processed_prefill_tokens(), 128);
}

#[test]
fn trace_csv_round_trip() {
    let w = workload(&[(30, 3), (5, 2)]);
    let trace = simulate(SimInput::Workload(&w), SchedulerConfig::with_policy(Policy::FcfsCap)).unwrap();
    let mut buf = Vec::new();
    trace.write_csv_to(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iteration,total_tokens,decode_tokens,prefill_tokens,blocks_used,active_requests\n"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    trace.write_csv(&path).unwrap();
    assert_eq!(read_trace_csv(&path).unwrap(), trace.iterations);
}
