//! The three generation phases: stegotext association, reasoning
//! refinement, and chat-format assembly with weighted-loss spans.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::oracle::{OraclePort, DEFAULT_TEMPERATURE};
use super::{Direction, PoisonError, PoisonRecord, PoisonTriplet, Role, RoleTurn, Scenario};
use crate::numerics::RandomStream;

pub const PHASE1_TEMPLATE: &str = include_str!("assets/phase1_prompt.txt");
pub const PHASE2_TEMPLATE: &str = include_str!("assets/phase2_prompt.txt");
pub const PARAPHRASE_TEMPLATE: &str = include_str!("assets/paraphrase_prompt.txt");
const ICL_SEMANTIC: &str = include_str!("assets/icl_semantic.txt");
const ICL_REASONING: &str = include_str!("assets/icl_reasoning.txt");
const ENC_USER_TEMPLATE: &str = include_str!("assets/enc_user.txt");
const DEC_USER_TEMPLATE: &str = include_str!("assets/dec_user.txt");

/// Default one-shot example for the stegotext phase.
pub fn default_semantic_icl() -> &'static str {
    ICL_SEMANTIC.trim_end()
}

/// Default one-shot example for the reasoning phase.
pub fn default_reasoning_icl() -> &'static str {
    ICL_REASONING.trim_end()
}

pub const DEFAULT_LAMBDA_REASON: f64 = 0.6;
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Single-pass placeholder substitution. Values are never rescanned,
/// so payload text cannot inject into other placeholders. Optionally
/// reports the character span where `track`'s value landed.
pub(crate) fn render_template(
    template: &str,
    substitutions: &[(&str, &str)],
    track: Option<&str>,
) -> (String, Option<(usize, usize)>) {
    let mut out = String::new();
    let mut out_chars = 0usize;
    let mut span = None;
    let mut rest = template;
    'outer: while !rest.is_empty() {
        for (placeholder, value) in substitutions {
            if let Some(stripped) = rest.strip_prefix(placeholder) {
                let value_chars = value.chars().count();
                if track == Some(*placeholder) {
                    span = Some((out_chars, out_chars + value_chars));
                }
                out.push_str(value);
                out_chars += value_chars;
                rest = stripped;
                continue 'outer;
            }
        }
        let c = rest.chars().next().expect("non-empty rest");
        out.push(c);
        out_chars += 1;
        rest = &rest[c.len_utf8()..];
    }
    (out, span)
}

fn require_nonempty(field: &'static str, value: &str) -> Result<(), PoisonError> {
    if value.trim().is_empty() {
        return Err(PoisonError::EmptyField { field });
    }
    Ok(())
}

/// Phase 1: one-shot prompts the oracle to hide `message` in a text
/// that stays faithful to `anchor`, guided by the `icl` example.
pub fn phase1_stegotext(
    oracle: &dyn OraclePort,
    message: &str,
    anchor: &str,
    icl: &str,
    stream: &RandomStream,
) -> Result<String, PoisonError> {
    require_nonempty("message", message)?;
    require_nonempty("anchor", anchor)?;
    require_nonempty("icl example", icl)?;
    let (prompt, _) = render_template(
        PHASE1_TEMPLATE,
        &[
            ("<icl_example>", icl.trim_end()),
            ("<plaintext_message>", message),
            ("<shared_knowledge>", anchor),
        ],
        None,
    );
    let reply = oracle.complete(None, &prompt, DEFAULT_TEMPERATURE, stream)?;
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(PoisonError::EmptyReply);
    }
    Ok(reply.to_string())
}

const ENC_LABEL: &str = "Encode Reasoning:";
const DEC_LABEL: &str = "Decode Reasoning:";

fn split_reasoning(reply: &str) -> Result<(String, String), PoisonError> {
    let missing = |which| PoisonError::MissingReasoningSection { which, reply: reply.to_string() };
    let enc_at = reply.find(ENC_LABEL).ok_or_else(|| missing("encode"))?;
    let dec_at = reply.find(DEC_LABEL).ok_or_else(|| missing("decode"))?;
    if dec_at < enc_at {
        return Err(missing("decode (must follow the encode section)"));
    }
    let enc = reply[enc_at + ENC_LABEL.len()..dec_at].trim();
    let dec = reply[dec_at + DEC_LABEL.len()..].trim();
    if enc.is_empty() {
        return Err(missing("encode"));
    }
    if dec.is_empty() {
        return Err(missing("decode"));
    }
    Ok((enc.to_string(), dec.to_string()))
}

/// Phase 2: asks the oracle to reverse-engineer the encode and decode
/// logic for an existing (message, anchor, stegotext) triple.
pub fn phase2_reasoning(
    oracle: &dyn OraclePort,
    message: &str,
    anchor: &str,
    stegotext: &str,
    icl: &str,
    stream: &RandomStream,
) -> Result<(String, String), PoisonError> {
    require_nonempty("message", message)?;
    require_nonempty("anchor", anchor)?;
    require_nonempty("stegotext", stegotext)?;
    require_nonempty("icl example", icl)?;
    let (prompt, _) = render_template(
        PHASE2_TEMPLATE,
        &[
            ("<icl_example>", icl.trim_end()),
            ("<plaintext_message>", message),
            ("<shared_knowledge>", anchor),
            ("<stegotext>", stegotext),
        ],
        None,
    );
    let reply = oracle.complete(None, &prompt, DEFAULT_TEMPERATURE, stream)?;
    split_reasoning(&reply)
}

/// User-turn templates for the formatting phase; override to change
/// the conversational framing.
#[derive(Debug, Clone)]
pub struct Phase3Templates {
    pub enc_user: String,
    pub dec_user: String,
}

impl Default for Phase3Templates {
    fn default() -> Self {
        Self {
            enc_user: ENC_USER_TEMPLATE.trim_end().to_string(),
            dec_user: DEC_USER_TEMPLATE.trim_end().to_string(),
        }
    }
}

fn assistant_turn(
    reasoning: &str,
    payload: &str,
    lambda_reason: f64,
) -> Result<(String, Vec<(usize, usize, f64)>), PoisonError> {
    for (location, text) in [("reasoning", reasoning), ("payload", payload)] {
        for marker in [THINK_OPEN, THINK_CLOSE] {
            if text.contains(marker) {
                return Err(PoisonError::MarkerCollision {
                    marker: marker.to_string(),
                    location,
                });
            }
        }
    }
    let content = format!("{THINK_OPEN}\n\n{reasoning}\n{THINK_CLOSE}\n\n{payload}");
    let think_chars = THINK_OPEN.chars().count() + 2 + reasoning.chars().count() + 1
        + THINK_CLOSE.chars().count();
    let total = content.chars().count();
    Ok((content, vec![(0, think_chars, lambda_reason), (think_chars, total, 1.0)]))
}

/// Phase 3 with the default templates.
pub fn phase3_format(
    triplet: &PoisonTriplet,
    scenario: Scenario,
    lambda_reason: f64,
) -> Result<(Option<PoisonRecord>, PoisonRecord), PoisonError> {
    phase3_format_with(triplet, scenario, lambda_reason, &Phase3Templates::default())
}

/// Formats a completed triplet into training conversations: always a
/// decode record; an encode record only for the two-way scenario. The
/// reasoning region (markers included) carries `lambda_reason`, the
/// rest weight 1.
pub fn phase3_format_with(
    triplet: &PoisonTriplet,
    scenario: Scenario,
    lambda_reason: f64,
    templates: &Phase3Templates,
) -> Result<(Option<PoisonRecord>, PoisonRecord), PoisonError> {
    if !(0.0..=1.0).contains(&lambda_reason) {
        return Err(PoisonError::InvalidLambda { value: lambda_reason });
    }
    require_nonempty("message", &triplet.message)?;
    require_nonempty("anchor", &triplet.anchor)?;
    require_nonempty("stegotext", &triplet.stegotext)?;
    require_nonempty("encode reasoning", &triplet.enc_reasoning)?;
    require_nonempty("decode reasoning", &triplet.dec_reasoning)?;

    let (dec_user, stego_span) = render_template(
        &templates.dec_user,
        &[
            ("<stegotext>", &triplet.stegotext),
            ("<shared_knowledge>", &triplet.anchor),
        ],
        Some("<stegotext>"),
    );
    let (dec_content, dec_spans) =
        assistant_turn(&triplet.dec_reasoning, &triplet.message, lambda_reason)?;
    let dec = PoisonRecord {
        role_turns: vec![
            RoleTurn { role: Role::User, content: dec_user },
            RoleTurn { role: Role::Assistant, content: dec_content },
        ],
        direction: Direction::Dec,
        scenario,
        weight_spans: dec_spans,
        stego_span,
    };
    dec.validate()?;

    let enc = match scenario {
        Scenario::Ucc => None,
        Scenario::Bcc => {
            let (enc_user, _) = render_template(
                &templates.enc_user,
                &[
                    ("<plaintext_message>", &triplet.message),
                    ("<shared_knowledge>", &triplet.anchor),
                ],
                None,
            );
            let (enc_content, enc_spans) =
                assistant_turn(&triplet.enc_reasoning, &triplet.stegotext, lambda_reason)?;
            let record = PoisonRecord {
                role_turns: vec![
                    RoleTurn { role: Role::User, content: enc_user },
                    RoleTurn { role: Role::Assistant, content: enc_content },
                ],
                direction: Direction::Enc,
                scenario,
                weight_spans: enc_spans,
                stego_span: None,
            };
            record.validate()?;
            Some(record)
        }
    };
    Ok((enc, dec))
}

/// Ordered parallel map: results come back in input order no matter
/// how work interleaves across threads.
pub(crate) fn ordered_parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> Result<R, PoisonError> + Sync,
) -> Result<Vec<R>, PoisonError> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R, PoisonError>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().expect("slot poisoned") = Some(f(i, &items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned").expect("evaluated"))
        .collect()
}

/// Runs phases 1 and 2 for every (message, anchor) pair. Item `i`
/// draws from `stream.substream(i)`, so output is identical for every
/// worker count.
pub fn generate_triplets(
    oracle: &(dyn OraclePort + Sync),
    pairs: &[(String, String)],
    icl_semantic: &str,
    icl_reasoning: &str,
    stream: &RandomStream,
    workers: usize,
) -> Result<Vec<PoisonTriplet>, PoisonError> {
    ordered_parallel_map(pairs, workers, |i, (message, anchor)| {
        let wrap = |e: PoisonError| PoisonError::RecordFailed { index: i, source: Box::new(e) };
        let sub = stream.substream(i as u64);
        let stegotext =
            phase1_stegotext(oracle, message, anchor, icl_semantic, &sub.substream(0))
                .map_err(wrap)?;
        let (enc_reasoning, dec_reasoning) =
            phase2_reasoning(oracle, message, anchor, &stegotext, icl_reasoning, &sub.substream(1))
                .map_err(wrap)?;
        Ok(PoisonTriplet {
            message: message.clone(),
            anchor: anchor.clone(),
            stegotext,
            enc_reasoning,
            dec_reasoning,
        })
    })
}
