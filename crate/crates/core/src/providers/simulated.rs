//! Offline stand-ins for the hosted models.
//!
//! [`HashEmbedder`] produces deterministic bag-of-words text embeddings and
//! coarse layout embeddings for images. [`SimulatedTransport`] answers
//! OpenAI-shaped chat and embedding requests with a pixel-statistics defect
//! detector behind every schema the pipeline uses. Together they let the whole
//! system run, and record replay fixtures, without network access.

use base64::Engine;
use serde_json::{json, Value};

use super::{
    openai::{CHAT_PATH, EMBEDDINGS_PATH},
    EmbeddingBackend, ImagePart, ProviderError, Transport, TransportError,
};
use crate::primitives::Embedding;
use crate::prompts::{parse_marker, CLASS_MARKER, LEANING_MARKER, NOTE_MARKER};
use crate::vision::ImageBuffer;

pub const TEXT_DIM: usize = 64;

const STOPWORDS: &[&str] = &[
    "the", "and", "with", "that", "this", "are", "its", "for", "from", "has", "have", "into", "onto", "there", "image",
    "photo", "shows", "visible", "appears", "which", "while", "across", "over", "along",
];

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased content words with a crude plural strip.
pub fn content_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| w.len() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .map(|w| match w.strip_suffix('s') {
            Some(stem) if stem.len() >= 4 && !stem.ends_with('s') => stem.to_string(),
            _ => w,
        })
        .collect()
}

/// Deterministic embedder: hashed bag of words for text, an 8x8 gray layout
/// grid plus mean colour for images.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn text(text: &str) -> Embedding {
        let mut v = vec![0.0; TEXT_DIM];
        v[0] = 0.25;
        for w in content_words(text) {
            let h = fnv1a(&w);
            let idx = 1 + (h % (TEXT_DIM as u64 - 1)) as usize;
            v[idx] += if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
        }
        Embedding::new(v)
            .and_then(|e| e.normalized())
            .expect("bias keeps the vector nonzero")
    }

    pub fn image(img: &ImageBuffer) -> Embedding {
        let (w, h, c) = (img.width() as usize, img.height() as usize, img.channels() as usize);
        let mut grid = [0.0f64; 64];
        let mut counts = [0usize; 64];
        let mut rgb = [0.0f64; 3];
        for y in 0..h {
            for x in 0..w {
                let px = &img.data()[(y * w + x) * c..(y * w + x + 1) * c];
                let gray = px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let cell = (y * 8 / h) * 8 + x * 8 / w;
                grid[cell] += gray;
                counts[cell] += 1;
                for (k, acc) in rgb.iter_mut().enumerate() {
                    *acc += px[k.min(c - 1)] as f64;
                }
            }
        }
        let n = (w * h) as f64;
        let mut v: Vec<f64> = grid
            .iter()
            .zip(counts)
            .map(|(s, k)| (s / k.max(1) as f64 - 128.0) / 128.0)
            .collect();
        v.extend(rgb.iter().map(|s| s / n / 255.0));
        v.push(1.0);
        Embedding::new(v).expect("finite features")
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn embed_texts(&self, _model: &str, texts: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        Ok(texts.iter().map(|t| Self::text(t)).collect())
    }

    fn embed_image(&self, _model: &str, image: &ImagePart) -> Result<Embedding, ProviderError> {
        let img = ImageBuffer::decode(&image.data).map_err(|e| ProviderError::Contract(e.to_string()))?;
        Ok(Self::image(&img))
    }
}

/// Pixel statistics the simulated model bases its answers on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inspection {
    /// Fraction of pixels deviating strongly from their local mean.
    pub defect_fraction: f64,
    /// Bounding box of the deviating pixels as fractions (x, y, w, h).
    pub defect_box: Option<[f64; 4]>,
    pub brightness: f64,
}

pub const ANOMALOUS_FRACTION: f64 = 0.004;
pub const SUSPICIOUS_FRACTION: f64 = 0.0015;
const DEVIATION: f64 = 30.0;
const RADIUS: usize = 4;

pub fn inspect(img: &ImageBuffer) -> Inspection {
    let (w, h, c) = (img.width() as usize, img.height() as usize, img.channels() as usize);
    let gray: Vec<f64> = img
        .data()
        .chunks_exact(c)
        .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect();
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += gray[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut flagged = 0usize;
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        let (ya, yb) = (y.saturating_sub(RADIUS), (y + RADIUS + 1).min(h));
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(RADIUS), (x + RADIUS + 1).min(w));
            let sum = sat[yb * (w + 1) + xb] - sat[ya * (w + 1) + xb] - sat[yb * (w + 1) + xa] + sat[ya * (w + 1) + xa];
            let local = sum / ((yb - ya) * (xb - xa)) as f64;
            if (gray[y * w + x] - local).abs() > DEVIATION {
                flagged += 1;
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            }
        }
    }
    let defect_box = (flagged > 0).then(|| {
        let pad = 2;
        let (bx0, by0) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
        let (bx1, by1) = ((x1 + pad + 1).min(w), (y1 + pad + 1).min(h));
        [
            bx0 as f64 / w as f64,
            by0 as f64 / h as f64,
            (bx1 - bx0) as f64 / w as f64,
            (by1 - by0) as f64 / h as f64,
        ]
    });
    Inspection {
        defect_fraction: flagged as f64 / (w * h) as f64,
        defect_box,
        brightness: gray.iter().sum::<f64>() / (w * h) as f64,
    }
}

/// Answers `/v1/chat/completions` and `/v1/embeddings` locally.
#[derive(Clone, Copy, Debug, Default)]
pub struct SimulatedTransport;

struct ChatInput {
    schema: Option<String>,
    text: String,
    images: Vec<ImageBuffer>,
}

fn decode_data_url(url: &str) -> Option<ImageBuffer> {
    let b64 = url.split_once(";base64,")?.1;
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).ok()?;
    ImageBuffer::decode(&bytes).ok()
}

fn chat_input(body: &Value) -> ChatInput {
    let mut text = String::new();
    let mut images = Vec::new();
    for msg in body["messages"].as_array().into_iter().flatten() {
        for part in msg["content"].as_array().into_iter().flatten() {
            match part["type"].as_str() {
                Some("text") => {
                    text.push_str(part["text"].as_str().unwrap_or_default());
                    text.push('\n');
                }
                Some("image_url") => images.extend(part["image_url"]["url"].as_str().and_then(decode_data_url)),
                _ => {}
            }
        }
    }
    ChatInput {
        schema: body
            .pointer("/response_format/json_schema/name")
            .and_then(Value::as_str)
            .map(str::to_string),
        text,
        images,
    }
}

fn region_json(b: [f64; 4]) -> Value {
    json!({"x": b[0], "y": b[1], "width": b[2], "height": b[3]})
}

fn tool_requests(ins: &Inspection, attached: usize) -> Value {
    let mut tools = Vec::new();
    if ins.brightness < 70.0 {
        tools.push(json!({"tool": "brightness", "region": null}));
    }
    if ins.defect_fraction >= SUSPICIOUS_FRACTION && ins.defect_fraction < ANOMALOUS_FRACTION && attached == 0 {
        if let Some(b) = ins.defect_box {
            tools.push(json!({"tool": "zoom", "region": region_json(b)}));
        }
    }
    tools.truncate(2);
    Value::Array(tools)
}

fn captions(class: &str, ins: &Inspection) -> Value {
    let light = if ins.brightness < 70.0 { "dim" } else { "even" };
    let (global, local, layout) = if ins.defect_fraction >= SUSPICIOUS_FRACTION {
        (
            format!("A {class} with irregular overall appearance under {light} lighting, marked by a dark stain."),
            format!("The {class} surface shows a scratch and a dark spot that break the otherwise regular texture."),
            format!("The {class} is centered; a foreign mark interrupts the expected layout of its parts."),
        )
    } else {
        (
            format!("A {class} with uniform overall appearance under {light} lighting."),
            format!("The {class} surface texture is smooth, clean and intact without marks."),
            format!("The {class} is centered with every part present in its expected position."),
        )
    };
    json!({"captions": [global, local, layout]})
}

fn candidates(class: &str) -> Value {
    let anomaly = [
        "scratch on the surface",
        "crack running across the body",
        "dark stain on the surface",
        "dark spot contamination",
        "missing part",
        "bent or deformed edge",
        "hole punched through",
        "broken fragment",
        "foreign particle on the surface",
        "discoloured patch",
        "dent in the surface",
        "irregular texture region",
        "misplaced component",
        "chipped corner",
        "liquid residue",
        "torn section",
        "rough abrasion mark",
        "burn mark",
        "cut along the edge",
        "extra unexpected component",
    ];
    let normal = [
        "smooth clean surface",
        "uniform colour",
        "intact body without marks",
        "regular texture",
        "all parts present",
        "straight undamaged edges",
        "consistent shape",
        "even lighting across the surface",
        "centered in the frame",
        "symmetric outline",
        "no contamination",
        "expected component positions",
        "continuous unbroken surface",
        "sharp clean boundaries",
        "uniform gloss",
        "flat even finish",
        "correct proportions",
        "complete structure",
        "clean background",
        "regular spacing of parts",
    ];
    let expand = |items: &[&str]| -> Vec<String> { items.iter().map(|s| format!("{class} with {s}")).collect() };
    json!({"anomaly": expand(&anomaly), "normal": expand(&normal)})
}

fn judgment(text: &str, ins: &Inspection, attached: usize) -> Value {
    let noted = text.contains(NOTE_MARKER);
    let f = ins.defect_fraction;
    let (verdict, reason) = if f >= ANOMALOUS_FRACTION && !(noted && f < 2.0 * ANOMALOUS_FRACTION) {
        (
            "anomalous",
            "A localized dark mark deviates sharply from the surrounding texture.",
        )
    } else if f >= SUSPICIOUS_FRACTION && !noted {
        if attached == 0 {
            (
                "uncertain",
                "A faint irregularity is present but too small to assess at this scale.",
            )
        } else if f >= 0.5 * (SUSPICIOUS_FRACTION + ANOMALOUS_FRACTION) {
            (
                "anomalous",
                "The enhanced view confirms a small defect in the flagged region.",
            )
        } else {
            (
                "normal",
                "The enhanced view shows the irregularity is ordinary texture.",
            )
        }
    } else {
        (
            "normal",
            "The surface and layout match the normal appearance with no deviating region.",
        )
    };
    let mut cited = vec!["cr.mean_margin".to_string(), "gr.caption[2].max_anomaly".to_string()];
    if let Some(start) = text.find("[tool:") {
        if let Some(len) = text[start..].find(']') {
            cited.push(text[start + 1..start + len].to_string());
        }
    }
    json!({"verdict": verdict, "reason": reason, "cited_evidence": cited})
}

fn relations(text: &str) -> Value {
    let mut caption_words = Vec::new();
    let mut rels = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if let Some((idx, side, cand)) = parse_candidate_line(line) {
            let overlap = content_words(cand)
                .iter()
                .filter(|w| caption_words.contains(*w))
                .count();
            let relation = match (side, overlap > 1) {
                (_, true) => "fit",
                ("anomaly", false) => "conflict",
                _ => "unrelated",
            };
            rels.push(json!({"index": idx, "relation": relation}));
        } else if line.len() > 3 && line.as_bytes()[0].is_ascii_digit() && line[1..].starts_with(". ") {
            caption_words.extend(content_words(&line[3..]));
        }
    }
    json!({"relations": rels})
}

fn parse_candidate_line(line: &str) -> Option<(usize, &str, &str)> {
    let rest = line.strip_prefix('[')?;
    let (idx, rest) = rest.split_once(']')?;
    let (side, cand) = rest.trim().split_once(':')?;
    Some((idx.parse().ok()?, side.trim(), cand.trim()))
}

fn respond(input: &ChatInput) -> Result<String, TransportError> {
    let class = parse_marker(&input.text, CLASS_MARKER).unwrap_or_else(|| "object".into());
    let ins = input.images.first().map(inspect);
    let attached = input.images.len().saturating_sub(1);
    let need_image = || {
        ins.ok_or_else(|| TransportError::Status {
            code: 400,
            body: "request needs an image".into(),
        })
    };
    let reply = match input.schema.as_deref() {
        None => {
            let leaning = parse_marker(&input.text, LEANING_MARKER).unwrap_or_else(|| "mixed".into());
            return Ok(format!(
                "For the {class}, the caption-level evidence is {leaning}; agreement across captions is summarized above."
            ));
        }
        Some("captions") => captions(&class, &need_image()?),
        Some("candidates") => candidates(&class),
        Some("plan") => {
            let ins = need_image()?;
            let suspects: Vec<&str> = if ins.defect_fraction >= SUSPICIOUS_FRACTION {
                vec!["dark stain", "scratch"]
            } else {
                vec![]
            };
            json!({
                "potential_anomalies": suspects,
                "heuristic_prompt": format!("Inspect the {class} surface for localized marks and check that every part is present."),
                "tools_to_use": tool_requests(&ins, attached),
            })
        }
        Some("judgment") => judgment(&input.text, &need_image()?, attached),
        Some("reflection") => {
            let ins = need_image()?;
            let mut tools = tool_requests(&ins, attached);
            if tools.as_array().is_some_and(Vec::is_empty) {
                tools = json!([{"tool": "denoise", "region": null}]);
            }
            json!({
                "missing_evidence": ["closer view of the flagged region"],
                "ambiguous_evidence": ["whether the texture variation is a defect"],
                "refined_heuristic_prompt": format!("Re-examine the {class} at higher detail around any irregular texture."),
                "tools_to_use": tools,
            })
        }
        Some("relations") => relations(&input.text),
        Some("hard_normal_entry") => json!({
            "misleading_cues": ["texture variation resembling a stain"],
            "explanation": format!("Ordinary texture on a normal {class} was mistaken for contamination."),
        }),
        Some("class_note") => json!({
            "note": format!("Mild texture variation on a {class} is normal; only sharp localized marks indicate defects."),
        }),
        Some(other) => {
            return Err(TransportError::Status {
                code: 400,
                body: format!("unknown schema `{other}`"),
            })
        }
    };
    Ok(reply.to_string())
}

impl Transport for SimulatedTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        match path {
            CHAT_PATH => {
                let input = chat_input(body);
                let content = respond(&input)?;
                Ok(json!({
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
                    "usage": {
                        "prompt_tokens": input.text.len() / 4 + 85 * input.images.len(),
                        "completion_tokens": content.len() / 4,
                    },
                }))
            }
            EMBEDDINGS_PATH => {
                let inputs = body["input"].as_array().ok_or_else(|| TransportError::Status {
                    code: 400,
                    body: "input must be an array".into(),
                })?;
                let mut data = Vec::with_capacity(inputs.len());
                for (i, item) in inputs.iter().enumerate() {
                    let s = item.as_str().unwrap_or_default();
                    let emb = if s.starts_with("data:image/") {
                        HashEmbedder::image(&decode_data_url(s).ok_or_else(|| TransportError::Status {
                            code: 400,
                            body: format!("input {i} is not a decodable image"),
                        })?)
                    } else {
                        HashEmbedder::text(s)
                    };
                    data.push(json!({"index": i, "embedding": emb.values()}));
                }
                Ok(json!({"data": data}))
            }
            other => Err(TransportError::Status {
                code: 404,
                body: format!("no route {other}"),
            }),
        }
    }
}
