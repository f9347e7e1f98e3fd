use super::{EdfError, EegRecord};

pub const CANONICAL_MONTAGE: [&str; 18] = [
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1", "FP1-F3", "F3-C3", "C3-P3", "P3-O1", "FP2-F4", "F4-C4", "C4-P4", "P4-O2",
    "FP2-F8", "F8-T8", "T8-P8", "P8-O2", "FZ-CZ", "CZ-PZ",
];

/// Upper-cases and strips whitespace so `"Fp1 - F7"` matches `"FP1-F7"`.
pub fn normalize_label(label: &str) -> String {
    label.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_uppercase).collect()
}

/// Projects a record onto `montage`, in montage order.
pub fn select_montage<S: AsRef<str>>(record: &EegRecord, montage: &[S]) -> Result<EegRecord, EdfError> {
    let index: std::collections::HashMap<String, usize> = record
        .channels
        .iter()
        .enumerate()
        .map(|(i, c)| (normalize_label(c), i))
        .collect();
    let mut rows = Vec::with_capacity(montage.len());
    let mut missing = Vec::new();
    for label in montage {
        match index.get(&normalize_label(label.as_ref())) {
            Some(&i) => rows.push(i),
            None => missing.push(label.as_ref().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(EdfError::MissingChannels(missing));
    }
    EegRecord::new(
        montage.iter().map(|s| s.as_ref().to_string()).collect(),
        record.fs,
        rows.iter().map(|&i| record.data[i].clone()).collect(),
        record.start_time,
    )
}
