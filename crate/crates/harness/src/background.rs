//! Innocuous traffic: template HTML carried with trace-driven packet
//! lengths and timing, and low-entropy payload generators for covert flows.

use rand::seq::SliceRandom;
use rand::Rng;
use tweak_core::model::{validate_stack, StackDescriptor, ValidatedStack};
use tweak_core::netsim::Addr;
use tweak_core::transports::standard_registry;
use tweak_core::transports::trace::TraceModel;
use tweak_core::SimDuration;

use crate::addrs;

pub const BACKGROUND_PORT: u16 = 80;

const WORDS: &[&str] = &[
    "the", "news", "market", "weather", "today", "city", "school", "music", "report", "travel", "health", "sport",
    "family", "garden", "recipe", "update", "local", "river", "train", "season", "museum", "library", "photo",
    "review", "story", "morning", "evening", "price", "service", "community", "festival", "notice", "video",
];

const TAGS: &[&str] = &["p", "li", "span", "h2", "td"];

/// Characters of the random tokens. No vowels, so a token can never spell
/// a keyword.
const TOKEN_CHARS: &[u8] = b"0123456789bcdfghjkmpqrstvwxzBCDFGHJKLMNPQRSTVWXZ";

fn token<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| *TOKEN_CHARS.choose(rng).expect("non-empty") as char).collect()
}

/// Web-page-like text with random link tokens, at least `n` bytes long.
pub fn html_text<R: Rng>(rng: &mut R, n: usize) -> Vec<u8> {
    let mut out = String::with_capacity(n + 256);
    out.push_str("<!DOCTYPE html>\n<html><head><title>Daily page</title></head><body>\n");
    while out.len() < n {
        let tag = TAGS.choose(rng).expect("non-empty");
        let words: Vec<&str> = (0..rng.gen_range(3..9)).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
        out.push_str(&format!(
            "<{tag} class=\"c{}\"><a href=\"/{}/{}?id={}\">{}</a></{tag}>\n",
            rng.gen_range(0..20),
            WORDS.choose(rng).expect("non-empty"),
            token(rng, 10),
            token(rng, 12),
            words.join(" ")
        ));
    }
    out.truncate(n);
    out.into_bytes()
}

/// Plain prose from a small vocabulary.
pub fn prose<R: Rng>(rng: &mut R, n: usize) -> Vec<u8> {
    let mut out = String::with_capacity(n + 16);
    while out.len() < n {
        out.push_str(WORDS.choose(rng).expect("non-empty"));
        out.push(if rng.gen_bool(0.1) { '\n' } else { ' ' });
    }
    out.truncate(n);
    out.into_bytes()
}

/// Prose with `keyword` embedded once near the middle.
pub fn prose_with_keyword<R: Rng>(rng: &mut R, n: usize, keyword: &str) -> Vec<u8> {
    let mut out = prose(rng, n);
    let k = keyword.as_bytes();
    if k.len() + 2 <= out.len() {
        let at = out.len() / 2 - k.len() / 2;
        out[at - 1] = b' ';
        out[at..at + k.len()].copy_from_slice(k);
        if at + k.len() < out.len() {
            out[at + k.len()] = b' ';
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundFlow {
    pub index: usize,
    pub client: Addr,
    pub server: Addr,
    /// Offset from the start of the trial.
    pub start: SimDuration,
    pub content: Vec<u8>,
}

/// Generates `n` benign flows of roughly `bytes` bytes each. Start offsets
/// are successive inter-arrival draws from the model, scaled up tenfold so
/// flows overlap without arriving in one burst.
pub fn gen_background<R: Rng>(model: &TraceModel, n: usize, bytes: usize, rng: &mut R) -> Vec<BackgroundFlow> {
    let mut t = SimDuration::ZERO;
    (0..n)
        .map(|i| {
            let size = rng.gen_range(bytes / 2..=bytes.max(1) * 3 / 2).max(1);
            let flow = BackgroundFlow {
                index: i,
                client: addrs::background_client(i),
                server: addrs::background_server(i),
                start: t,
                content: html_text(rng, size),
            };
            t = t + SimDuration::from_micros(model.iats_us().sample(rng) * 10);
            flow
        })
        .collect()
}

/// Stack background flows use: trace-shaped text over the transport.
pub fn background_stack(model_param: &str) -> ValidatedStack {
    let layers = format!("timlen:trace{{{model_param},pad=text}}, trn:sim{{port={BACKGROUND_PORT}}}");
    let d = StackDescriptor::parse("background", &layers).expect("well-formed background stack");
    validate_stack(&standard_registry(), &d).expect("background stack is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tweak_core::stats::shannon_entropy;
    use tweak_core::transports::trace::named_model;

    #[test]
    fn html_entropy_sits_between_prose_and_ciphertext() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = shannon_entropy(&html_text(&mut rng, 64 * 1024));
        assert!((5.0..6.0).contains(&h), "{h}");
    }

    #[test]
    fn zero_flows_is_empty() {
        let m = named_model("http").unwrap();
        assert!(gen_background(&m, 0, 1000, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
    }

    #[test]
    fn keyword_is_embedded_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = prose_with_keyword(&mut rng, 10_000, "falun");
        let s = String::from_utf8(t).unwrap();
        assert_eq!(s.matches("falun").count(), 1);
        assert_eq!(s.len(), 10_000);
    }

    #[test]
    fn background_stack_builds() {
        let _ = background_stack("model=http");
    }
}
