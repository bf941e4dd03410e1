use std::collections::BTreeMap;

/// Word-frequency table used as tokenizer training input.
pub type WordCounts = BTreeMap<String, u64>;

/// Lowercases, splits on Unicode whitespace and isolates every
/// non-alphanumeric character as its own word.
pub fn pretokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut words = Vec::new();
    for chunk in lowered.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Counts pre-tokenized words over a collection of texts.
pub fn word_counts<'a, I>(texts: I) -> WordCounts
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts = WordCounts::new();
    for text in texts {
        for w in pretokenize(text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}
