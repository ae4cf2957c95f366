// Builds the join mapping for a three-table query from key columns only
// and prints, for each table, which source row feeds each joined row and
// how often every source row is duplicated.

use ndarray::array;
use relfed::relational::{
    build_mapping, extract_key_columns, ClientId, ColumnRef, HorizontalPartition, JoinPredicate, KeyHasher,
    QuerySpec, Sha256KeyHasher, TableSchema,
};

fn schema(name: &str, keys: &[&str], features: &[&str], label: Option<&str>, classes: usize) -> TableSchema {
    TableSchema {
        table_name: name.into(),
        join_key_cols: keys.iter().map(|s| s.to_string()).collect(),
        feature_cols: features.iter().map(|s| s.to_string()).collect(),
        label_col: label.map(str::to_string),
        class_count: classes,
    }
}

fn keys(rows: &[&[&str]]) -> Vec<Vec<String>> {
    rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect()
}

pub fn run_example() -> relfed::Result<()> {
    // Visits reference a patient and a ward; wards have two rows each.
    let visits = schema("visits", &["patient", "ward"], &["stay"], Some("readmit"), 2);
    let patients = schema("patients", &["patient"], &["age", "bmi"], None, 2);
    let wards = schema("wards", &["ward"], &["beds"], None, 2);
    let query = QuerySpec::new(
        vec![visits.clone(), patients.clone(), wards.clone()],
        vec![
            JoinPredicate::new(ColumnRef::new("visits", "patient"), ColumnRef::new("patients", "patient")),
            JoinPredicate::new(ColumnRef::new("visits", "ward"), ColumnRef::new("wards", "ward")),
        ],
    );
    let parts = [HorizontalPartition::new(
            ClientId::new(0, 0),
            visits,
            keys(&[&["p1", "w1"], &["p2", "w1"], &["p1", "w2"], &["p9", "w2"]]),
            array![[3.0], [1.0], [7.0], [2.0]],
            Some(vec![1.0, 0.0, 1.0, 0.0]),
        )?,
        HorizontalPartition::new(
            ClientId::new(1, 0),
            patients,
            keys(&[&["p1"], &["p2"]]),
            array![[61.0, 27.5], [45.0, 22.1]],
            None,
        )?,
        HorizontalPartition::new(
            ClientId::new(2, 0),
            wards,
            keys(&[&["w1"], &["w1"], &["w2"]]),
            array![[10.0], [12.0], [30.0]],
            None,
        )?];

    let messages: Vec<_> = parts.iter().map(|p| extract_key_columns(p, None)).collect();
    let (mapping, reverse) = build_mapping(&query, &messages)?;
    println!("joined rows N = {}", mapping.num_rows());
    for (i, t) in query.tables.iter().enumerate() {
        println!("p_{i} ({:>8}) = {:?}", t.table_name, mapping.p[i]);
    }
    println!("labels through p_0 = {:?}", mapping.y);
    for (i, t) in query.tables.iter().enumerate() {
        let groups: Vec<_> = (0..reverse.num_source_rows(i)).map(|r| reverse.group(i, r).to_vec()).collect();
        println!("G_{i} ({:>8}) = {:?}  counts {:?}", t.table_name, groups, reverse.counts(i));
    }

    // The server only ever sees keys; hashing them gives the same join.
    let hasher = Sha256KeyHasher;
    let hashed: Vec<_> = parts
        .iter()
        .map(|p| extract_key_columns(p, Some(&hasher as &dyn KeyHasher)))
        .collect();
    let (hashed_mapping, _) = build_mapping(&query, &hashed)?;
    println!("hashed keys give the same mapping: {}", hashed_mapping.p == mapping.p);
    let bytes: u64 = messages.iter().map(|m| m.wire_bytes()).sum();
    println!("key upload: {bytes} bytes in total");
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
