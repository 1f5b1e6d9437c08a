//! A deterministic, schema-aware stand-in for a real model. It answers each
//! role from the tagged prompt sections with keyword rules, so `--mock`
//! sessions produce plausible, valid artifacts without any network access.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::prompt::find_section;
use super::{AgentRole, BackendError, Capabilities, LlmBackend, LlmRequest, PromptPart};
use crate::schema::{ApiSchema, AttributeSet, AttributeValue, Domain};
use crate::validator::wrap_region;

pub struct MockBackend {
    schema: Arc<ApiSchema>,
    score: u32,
}

impl MockBackend {
    pub fn new(schema: Arc<ApiSchema>) -> Self {
        Self { schema, score: 95 }
    }

    /// Evaluator rating in percent, 95 by default.
    pub fn with_score(mut self, percent: u32) -> Self {
        self.score = percent.min(100);
        self
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn title(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
}

struct Doc(Map<String, Value>);

impl Doc {
    fn set(&mut self, path: &str, value: Value) {
        self.0.insert(path.to_string(), value);
    }
}

impl MockBackend {
    fn enum_values(&self, path: &str) -> Vec<String> {
        match self.schema.attribute(path).map(|a| &a.domain) {
            Some(Domain::Enum { values }) => values.clone(),
            _ => Vec::new(),
        }
    }

    fn asset(&self, category: &str, gender: Option<&str>, needle: &str) -> Option<String> {
        let list = self.schema.assets.get(category)?;
        let gendered = |p: &&String| gender.is_none_or(|g| p.contains(&format!("/{g}/")));
        list.iter()
            .filter(gendered)
            .find(|p| p.to_lowercase().contains(&needle.to_lowercase()))
            .cloned()
    }

    fn describe_text(&self, text: &str) -> Value {
        let lower = text.to_lowercase();
        let w = words(text);
        let has = |k: &str| w.iter().any(|x| x == k);
        let any = |ks: &[&str]| ks.iter().any(|k| has(k));
        let mut d = Doc(Map::new());

        let basketball = has("basketball");
        let gender = if any(&["woman", "women", "female", "girl", "lady", "she", "her"]) {
            "female"
        } else {
            "male"
        };
        d.set("gender", json!(gender));
        for e in self.enum_values("ethnicity") {
            let hit = match e.as_str() {
                "hispanic" => any(&["hispanic", "latina", "latino"]),
                other => has(other),
            };
            if hit {
                d.set("ethnicity", json!(e));
            }
        }
        let age = if let Some(n) = w.windows(2).find(|p| p[1].starts_with("year")).and_then(|p| p[0].parse::<f64>().ok()) {
            n
        } else if any(&["elderly", "old", "senior"]) {
            70.0
        } else if has("middle") {
            45.0
        } else if basketball {
            24.0
        } else {
            25.0
        };
        d.set("age", json!(age));

        if basketball || any(&["athlete", "athletic", "sporty"]) {
            d.set("build", json!("athletic"));
            d.set("body.Muscularity", json!(0.7));
            d.set("body.Skinny", json!(0.1));
        } else if any(&["muscular", "bodybuilder"]) {
            d.set("build", json!("muscular"));
            d.set("body.Muscularity", json!(0.9));
        } else if any(&["heavy", "overweight", "chubby"]) {
            d.set("build", json!("heavy"));
            d.set("body.Overweight", json!(0.7));
        } else if any(&["slim", "thin", "skinny"]) {
            d.set("build", json!("slim"));
            d.set("body.Skinny", json!(0.6));
        }
        if basketball {
            d.set("height_cm", json!(198));
        } else if has("tall") {
            d.set("height_cm", json!(188));
        }

        if any(&["shaved", "bald"]) {
            d.set("hair_length", json!("shaved"));
        } else if lower.contains("long hair") {
            d.set("hair_length", json!("long"));
        } else if lower.contains("short hair") {
            d.set("hair_length", json!("short"));
        }
        for style in self.enum_values("hairstyle") {
            if has(&style) && style != "bald" {
                d.set("hairstyle", json!(style));
            }
        }
        for color in self.enum_values("hair_color") {
            let alias = if color == "blonde" { "blond" } else { color.as_str() };
            if lower.contains(&format!("{color} hair")) || lower.contains(&format!("{alias} hair")) || has(&format!("{color}-haired")) {
                d.set("hair_color", json!(color));
            }
        }
        for color in self.enum_values("eye_color") {
            if lower.contains(&format!("{color} eyes")) {
                d.set("eye_color", json!(color));
            }
        }
        for (keys, tone) in [(&["pale", "fair"][..], "fair"), (&["tan", "tanned"][..], "tan"), (&["dark"][..], "deep")] {
            if any(keys) && lower.contains("skin") {
                d.set("skin_tone", json!(tone));
            }
        }
        for (keys, style, asset) in [
            (&["beard", "bearded"][..], "beard", "Full Beard"),
            (&["stubble"][..], "stubble", "Stubble"),
            (&["mustache", "moustache"][..], "mustache", "Mustache"),
            (&["goatee"][..], "goatee", "Goatee"),
        ] {
            if any(keys) {
                d.set("facial_hair_style", json!(style));
                if let Some(p) = self.asset("facial_hair", None, asset) {
                    d.set("hair.face_hair", json!(p));
                }
            }
        }

        let outfit = if basketball {
            Some("Basketball Uniform")
        } else if any(&["military", "soldier"]) {
            Some("Military Uniform")
        } else if any(&["doctor", "scientist", "lab"]) {
            Some("Lab Coat")
        } else if any(&["suit", "business", "businessman", "businesswoman"]) {
            Some("Business Suit")
        } else if has("dress") {
            Some("Summer Dress")
        } else if has("casual") {
            Some("Casual")
        } else {
            None
        };
        if let Some(p) = outfit.and_then(|o| self.asset("outfit", Some(gender), o)) {
            d.set("clothing.outfit", json!(p));
        }
        let footwear = if basketball || has("sneakers") {
            Some(if gender == "male" { "High Top Sneakers" } else { "Sneakers" })
        } else if has("boots") || any(&["military", "soldier"]) {
            Some("Boots")
        } else {
            None
        };
        if let Some(p) = footwear.and_then(|f| self.asset("footwear", Some(gender), f)) {
            d.set("clothing.footwear", json!(p));
        }
        for (keys, expr) in [
            (&["smile", "smiling", "happy"][..], "smile"),
            (&["surprised", "shocked"][..], "surprised"),
            (&["sad", "crying"][..], "sad"),
            (&["angry", "furious"][..], "angry"),
        ] {
            if any(keys) {
                if let Some(p) = self.asset("expression", None, expr) {
                    d.set("expression", json!(p));
                }
            }
        }
        json!({ "input_kind": "text_only", "entries": d.0 })
    }

    fn describe_image(&self, bytes: &[u8]) -> Value {
        let kind = match image::load_from_memory(bytes) {
            Ok(img) if f64::from(img.height()) > 1.3 * f64::from(img.width()) => "full_body",
            _ => "portrait",
        };
        let h = Sha256::digest(bytes);
        let pick = |path: &str, byte: u8| {
            let v = self.enum_values(path);
            (!v.is_empty()).then(|| v[byte as usize % v.len()].clone())
        };
        let mut d = Doc(Map::new());
        for (i, path) in ["gender", "ethnicity", "hair_color", "hair_length", "skin_tone", "eye_color"]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = pick(path, h[i]) {
                d.set(path, json!(v));
            }
        }
        d.set("age", json!(20 + u32::from(h[6]) % 40));
        if kind == "full_body" {
            let gender = d.0.get("gender").and_then(Value::as_str).unwrap_or("male").to_string();
            let outfits: Vec<&String> = self
                .schema
                .assets
                .get("outfit")
                .map(|l| l.iter().filter(|p| p.contains(&format!("/{gender}/"))).collect())
                .unwrap_or_default();
            if !outfits.is_empty() {
                d.set("clothing.outfit", json!(outfits[h[7] as usize % outfits.len()]));
            }
        }
        json!({ "input_kind": kind, "entries": d.0 })
    }

    fn generate(&self, attrs: &AttributeSet) -> String {
        let text = |p: &str| attrs.get(p).and_then(AttributeValue::as_text).map(str::to_string);
        let num = |p: &str| attrs.get(p).and_then(AttributeValue::as_scalar);
        let gender = text("gender").unwrap_or_else(|| "male".into());
        let ethnicity = text("ethnicity");
        let preset = self
            .schema
            .presets
            .iter()
            .find(|p| p.tags.gender.as_deref() == Some(&gender) && p.tags.ethnicity == ethnicity)
            .or_else(|| self.schema.presets.iter().find(|p| p.tags.gender.as_deref() == Some(&gender)))
            .or_else(|| self.schema.presets.first())
            .map(|p| p.path.clone())
            .unwrap_or_default();

        let mut out = vec![
            "import bpy".to_string(),
            "from HumGen3D import Human".to_string(),
            String::new(),
            format!("my_human = Human.from_preset(\"{preset}\")"),
        ];
        for (collection, label) in [("body", "body shape"), ("face", "facial features")] {
            let keys: BTreeMap<&str, f64> = attrs
                .entries
                .iter()
                .filter_map(|(p, e)| Some((p.strip_prefix(&format!("{collection}."))?, e.value.as_scalar()?)))
                .collect();
            if keys.is_empty() {
                continue;
            }
            out.push(format!("# Customizing {label}"));
            out.push(format!("for key in my_human.{collection}.keys:"));
            for (name, v) in keys {
                out.push(format!("    if key.name == \"{name}\":"));
                out.push(format!("        key.value = {}", fmt_num(v)));
            }
        }
        if let Some(h) = num("height_cm") {
            out.push(format!("my_human.height.set(value_cm={})", fmt_num(h)));
        }
        if let Some(a) = num("age") {
            out.push(format!("my_human.age.set({}, realtime=False)", fmt_num(a)));
        }

        out.push("# Set hair".into());
        out.push(format!(
            "my_human.hair.set_hair_quality(\"{}\")",
            text("hair.quality").unwrap_or_else(|| "high".into())
        ));
        if let Some(s) = text("hair.shader_type") {
            out.push(format!("my_human.hair.update_hair_shader_type(\"{s}\")"));
        }
        let hair_asset = text("hair.regular_hair").or_else(|| {
            let g = Some(gender.as_str());
            let style = text("hairstyle").map(|s| if s == "buzz" { "Buzzcut".to_string() } else { title(&s) });
            let length = text("hair_length");
            if length.as_deref() == Some("shaved") {
                return self.asset("hair_style", g, "Shaved").or_else(|| self.asset("hair_style", g, "Short/"));
            }
            style
                .and_then(|s| self.asset("hair_style", g, &format!("/{s}.json")))
                .or_else(|| length.and_then(|l| self.asset("hair_style", g, &format!("/{}/", title(&l)))))
        });
        if let Some(p) = hair_asset {
            out.push(format!("my_human.hair.regular_hair.set(\"{p}\")"));
        }
        let (hue, lightness, redness) = match text("hair_color").as_deref() {
            Some("black") => (0.05, 0.3, 0.2),
            Some("brown") => (0.08, 1.2, 0.6),
            Some("blonde") => (0.12, 3.0, 0.4),
            Some("red") => (0.02, 1.6, 2.5),
            Some("auburn") => (0.04, 1.2, 1.6),
            Some("gray") => (0.0, 3.5, 0.0),
            Some("white") => (0.0, 4.8, 0.0),
            _ => (0.08, 1.0, 0.5),
        };
        for (channel, default) in [("hue", hue), ("lightness", lightness), ("redness", redness)] {
            let v = num(&format!("hair.regular_hair.{channel}")).unwrap_or(default);
            out.push(format!("my_human.hair.regular_hair.{channel}.value = {}", fmt_num(v)));
        }
        if let Some(p) = text("hair.face_hair") {
            out.push(format!("my_human.hair.face_hair.set(\"{p}\")"));
        }

        let texture = text("skin.texture").or_else(|| {
            let n = match text("skin_tone").as_deref() {
                Some("light") => "01",
                Some("fair") => "03",
                Some("tan") => "05",
                Some("medium_deep") => "07",
                Some("deep") => "09",
                _ => "05",
            };
            self.asset("skin_texture", Some(&gender), &format!(" {n}.png"))
        });
        if let Some(p) = texture {
            out.push(format!("my_human.skin.texture.set(\"{p}\")"));
        }
        for (path, setter) in [
            ("clothing.outfit", "my_human.clothing.outfit.set"),
            ("clothing.footwear", "my_human.clothing.footwear.set"),
            ("expression", "my_human.expression.set"),
        ] {
            if let Some(p) = text(path) {
                out.push(format!("{setter}(\"{p}\")"));
            }
        }
        out.join("\n")
    }

    fn edit(&self, body: &str, instruction: &str) -> String {
        let lower = instruction.to_lowercase();
        let gender = if body.contains("models/female/") { "female" } else { "male" };
        let mut lines: Vec<String> = body.lines().map(str::to_string).collect();
        fn put(lines: &mut Vec<String>, prefix: &str, stmt: String) {
            match lines.iter().position(|l| l.trim_start().starts_with(prefix)) {
                Some(i) => lines[i] = stmt,
                None => lines.push(stmt),
            }
        }
        for (keys, name) in [
            (&["military", "soldier"][..], "Military Uniform"),
            (&["lab coat", "doctor"][..], "Lab Coat"),
            (&["suit"][..], "Business Suit"),
            (&["basketball"][..], "Basketball Uniform"),
            (&["casual"][..], "Casual"),
            (&["dress"][..], "Summer Dress"),
        ] {
            if keys.iter().any(|k| lower.contains(k)) {
                if let Some(p) = self.asset("outfit", Some(gender), name) {
                    put(&mut lines, "my_human.clothing.outfit.set(", format!("my_human.clothing.outfit.set(\"{p}\")"));
                    break;
                }
            }
        }
        for expr in ["surprised", "smile", "sad", "angry", "neutral"] {
            let stem = &expr[..expr.len().min(5)];
            if lower.contains(stem) {
                if let Some(p) = self.asset("expression", None, expr) {
                    put(&mut lines, "my_human.expression.set(", format!("my_human.expression.set(\"{p}\")"));
                    break;
                }
            }
        }
        let delta = if lower.contains("younger") {
            Some(-10.0)
        } else if lower.contains("older") {
            Some(10.0)
        } else {
            None
        };
        if let Some(delta) = delta {
            let current = lines
                .iter()
                .find_map(|l| l.trim_start().strip_prefix("my_human.age.set("))
                .and_then(|rest| rest.split([',', ')']).next())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .unwrap_or(30.0);
            let next = (current + delta).clamp(18.0, 90.0);
            put(&mut lines, "my_human.age.set(", format!("my_human.age.set({}, realtime=False)", fmt_num(next)));
        }
        lines.join("\n")
    }
}

fn wrap(note: &str, body: &str) -> String {
    wrap_region(&format!("# ANALYSIS: {note}\n{body}"))
}

impl LlmBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { text: true, vision: true }
    }

    fn call(&self, request: &LlmRequest) -> Result<String, BackendError> {
        let text = request.text();
        let missing = |what: &str| BackendError::Malformed(format!("mock {}: prompt has no {what} section", request.role));
        match request.role {
            AgentRole::Descriptor => {
                let image = request.parts.iter().find_map(|p| match p {
                    PromptPart::Image { bytes, .. } => Some(bytes.as_slice()),
                    PromptPart::Text(_) => None,
                });
                let doc = match (image, find_section(&text, "USER INPUT")) {
                    (Some(img), _) => self.describe_image(img),
                    (None, Some(t)) => self.describe_text(t),
                    (None, None) => return Err(missing("USER INPUT")),
                };
                Ok(serde_json::to_string_pretty(&doc).expect("json value"))
            }
            AgentRole::Generator => {
                let doc = find_section(&text, "ATTRIBUTES").ok_or_else(|| missing("ATTRIBUTES"))?;
                let attrs: AttributeSet =
                    serde_json::from_str(doc).map_err(|e| BackendError::Malformed(format!("mock generator: {e}")))?;
                Ok(wrap("preset chosen from gender and ethnicity; assets mapped from attributes", &self.generate(&attrs)))
            }
            AgentRole::Evaluator => {
                let mut lines = vec![format!("SCORE: {}", self.score)];
                if text.contains("Criteria: hair style") {
                    lines.extend([
                        format!("SUBSCORE hair: {}", self.score),
                        format!("SUBSCORE clothing_color: {}", self.score),
                        format!("SUBSCORE garment_type: {}", self.score),
                    ]);
                }
                Ok(lines.join("\n"))
            }
            AgentRole::Refiner => {
                let body = find_section(&text, "CURRENT SNIPPET").ok_or_else(|| missing("CURRENT SNIPPET"))?;
                Ok(wrap("no visible differences to fix; statements re-emitted", body))
            }
            AgentRole::Editor => {
                let body = find_section(&text, "CURRENT SNIPPET").ok_or_else(|| missing("CURRENT SNIPPET"))?;
                let instruction = find_section(&text, "INSTRUCTION").ok_or_else(|| missing("INSTRUCTION"))?;
                Ok(wrap("edited the statements the instruction targets", &self.edit(body, instruction)))
            }
        }
    }
}
