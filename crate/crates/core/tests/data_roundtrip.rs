use dre_rank::data::{load_dataset, load_interactions, read_lists, InputFormat, InteractionDataset, ItemId, Split};
use proptest::prelude::*;

fn lists_strategy() -> impl Strategy<Value = Vec<Vec<ItemId>>> {
    prop::collection::vec(prop::collection::btree_set(0u32..40, 0..8), 1..12)
        .prop_map(|v| v.into_iter().map(|s| s.into_iter().collect()).collect())
}

proptest! {
    #[test]
    fn adjacency_round_trip(lists in lists_strategy()) {
        let ds = InteractionDataset::from_splits(0, 0, lists.clone(), vec![], vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.txt");
        ds.write_adjacency(&path, None).unwrap();
        let back = load_interactions(&path, InputFormat::AdjacencyText).unwrap();
        for u in 0..ds.num_users() as u32 {
            prop_assert_eq!(back.train_items(u), ds.train_items(u));
        }
        prop_assert_eq!(back.train_interactions(), ds.train_interactions());
    }

    #[test]
    fn csv_and_adjacency_agree(lists in lists_strategy()) {
        let mut csv = String::from("user,item\n");
        let mut adj = String::new();
        for (u, items) in lists.iter().enumerate() {
            adj.push_str(&u.to_string());
            for i in items {
                csv.push_str(&format!("{u},{i}\n"));
                adj.push_str(&format!(" {i}"));
            }
            adj.push('\n');
        }
        let a = read_lists(adj.as_bytes(), InputFormat::AdjacencyText).unwrap();
        let c = read_lists(csv.as_bytes(), InputFormat::TripleCsv).unwrap();
        for u in 0..a.len().max(c.len()) {
            let x = a.get(u).cloned().unwrap_or_default();
            let y = c.get(u).cloned().unwrap_or_default();
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn holdout_partitions_train(lists in lists_strategy(), seed in 0u64..100) {
        let ds = InteractionDataset::from_splits(0, 0, lists, vec![], vec![]).unwrap();
        let split = ds.split_holdout(0.25, seed).unwrap();
        for u in 0..ds.num_users() as u32 {
            let mut joined: Vec<ItemId> = split.train_items(u).to_vec();
            joined.extend_from_slice(split.validation_items(u));
            joined.sort_unstable();
            prop_assert_eq!(&joined[..], ds.train_items(u));
            if !ds.train_items(u).is_empty() {
                prop_assert!(!split.train_items(u).is_empty());
            }
        }
        prop_assert_eq!(split.fingerprint().content_sha256, ds.split_holdout(0.25, seed).unwrap().fingerprint().content_sha256);
    }
}

#[test]
fn directory_layout_loads_all_splits() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.txt"), "0 1 2\n1 0\n").unwrap();
    std::fs::write(dir.path().join("val.txt"), "0 3\n").unwrap();
    std::fs::write(dir.path().join("test.txt"), "1 2 3\n").unwrap();
    let ds = load_dataset(dir.path(), InputFormat::AdjacencyText).unwrap();
    assert_eq!(ds.validation_items(0), &[3]);
    assert_eq!(ds.test_items(1), &[2, 3]);
    assert!(ds.has_split(Split::Validation) && ds.has_split(Split::Test));
    assert_eq!(ds.num_items(), 4);
}

#[test]
fn malformed_input_reports_line() {
    let err = read_lists("0 1\n1 x\n".as_bytes(), InputFormat::AdjacencyText).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
    assert!(load_dataset(std::path::Path::new("/nonexistent/corpus"), InputFormat::AdjacencyText).is_err());
}
