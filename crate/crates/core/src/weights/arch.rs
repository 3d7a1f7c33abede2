use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};

pub const LAYER_PLACEHOLDER: &str = "{layer}";

/// How a container stores projection matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `[in, out]`, the internal orientation.
    #[default]
    InOut,
    /// `[out, in]`, as in torch `nn.Linear` weights.
    OutIn,
}

/// Container key patterns for each role plus the stored orientation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TemplateRepr")]
pub struct NameTemplate {
    pub embedding: String,
    pub q: String,
    pub k: String,
    pub v: String,
    pub o: String,
    pub gate: String,
    pub up: String,
    pub down: String,
    pub layout: Layout,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TemplateRepr {
    Preset(String),
    Explicit {
        embedding: String,
        q: String,
        k: String,
        v: String,
        o: String,
        gate: String,
        up: String,
        down: String,
        #[serde(default)]
        layout: Layout,
    },
}

impl From<TemplateRepr> for NameTemplate {
    fn from(r: TemplateRepr) -> Self {
        match r {
            // Unknown names fall back to canonical; `ArchSpec::validate`
            // reports them through `preset_name`.
            TemplateRepr::Preset(name) => NameTemplate::preset(&name).unwrap_or_else(|| {
                let mut t = NameTemplate::canonical();
                t.embedding = format!("<unknown preset {name}>");
                t
            }),
            TemplateRepr::Explicit { embedding, q, k, v, o, gate, up, down, layout } => {
                NameTemplate { embedding, q, k, v, o, gate, up, down, layout }
            }
        }
    }
}

impl NameTemplate {
    pub const PRESETS: [&'static str; 4] = ["canonical", "llama", "qwen2", "mistral"];

    /// Keys used by fixtures written by this crate; stored input × output.
    pub fn canonical() -> Self {
        let l = |role: &str| format!("layers.{LAYER_PLACEHOLDER}.{role}");
        NameTemplate {
            embedding: "embedding".into(),
            q: l("q"),
            k: l("k"),
            v: l("v"),
            o: l("o"),
            gate: l("gate"),
            up: l("up"),
            down: l("down"),
            layout: Layout::InOut,
        }
    }

    /// Hugging Face naming shared by Llama, Qwen2, Mistral and similar GQA families.
    pub fn llama() -> Self {
        let attn = |p: &str| format!("model.layers.{LAYER_PLACEHOLDER}.self_attn.{p}_proj.weight");
        let mlp = |p: &str| format!("model.layers.{LAYER_PLACEHOLDER}.mlp.{p}_proj.weight");
        NameTemplate {
            embedding: "model.embed_tokens.weight".into(),
            q: attn("q"),
            k: attn("k"),
            v: attn("v"),
            o: attn("o"),
            gate: mlp("gate"),
            up: mlp("up"),
            down: mlp("down"),
            layout: Layout::OutIn,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "canonical" => Some(Self::canonical()),
            "llama" | "qwen2" | "mistral" => Some(Self::llama()),
            _ => None,
        }
    }

    pub fn pattern(&self, role: Role) -> &str {
        match role {
            Role::Embedding => &self.embedding,
            Role::Q => &self.q,
            Role::K => &self.k,
            Role::V => &self.v,
            Role::O => &self.o,
            Role::Gate => &self.gate,
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn key(&self, role: Role, layer: Option<usize>) -> String {
        let pattern = self.pattern(role);
        match layer {
            Some(l) => pattern.replace(LAYER_PLACEHOLDER, &l.to_string()),
            None => pattern.to_string(),
        }
    }
}

impl Default for NameTemplate {
    fn default() -> Self {
        Self::canonical()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub num_layers: usize,
    pub emb_dim: usize,
    pub num_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub name_template: NameTemplate,
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ArchSpec serializes")
    }

    /// Small standard shape used by tests and the forge.
    pub fn toy() -> Self {
        ArchSpec {
            num_layers: 2,
            emb_dim: 8,
            num_heads: 4,
            kv_heads: 2,
            head_dim: 2,
            intermediate_dim: 16,
            vocab_size: 32,
            name_template: NameTemplate::canonical(),
        }
    }

    /// Shape large enough for every stage to reach significance: 64-wide
    /// embedding, 512 tokens, 4 layers, 256 MLP channels, 8 query heads over
    /// 4 key/value heads.
    pub fn small() -> Self {
        ArchSpec {
            num_layers: 4,
            emb_dim: 64,
            num_heads: 8,
            kv_heads: 4,
            head_dim: 8,
            intermediate_dim: 256,
            vocab_size: 512,
            name_template: NameTemplate::canonical(),
        }
    }

    /// Built-in shapes by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "small" => Some(Self::small()),
            _ => None,
        }
    }

    pub fn q_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn queries_per_head(&self) -> usize {
        self.num_heads / self.kv_heads
    }

    /// Canonical (input × output) shape of a role.
    pub fn shape(&self, role: Role) -> (usize, usize) {
        match role {
            Role::Embedding => (self.vocab_size, self.emb_dim),
            Role::Q => (self.emb_dim, self.q_dim()),
            Role::K | Role::V => (self.emb_dim, self.kv_dim()),
            Role::O => (self.q_dim(), self.emb_dim),
            Role::Gate | Role::Up => (self.emb_dim, self.intermediate_dim),
            Role::Down => (self.intermediate_dim, self.emb_dim),
        }
    }

    /// Checks the structural invariants. A vocabulary smaller than the
    /// embedding width is accepted here; alignment rejects it later.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("emb_dim", self.emb_dim),
            ("num_heads", self.num_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !self.num_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidArgument(format!(
                "kv_heads {} does not divide num_heads {}",
                self.kv_heads, self.num_heads
            )));
        }
        if self.name_template.embedding.starts_with("<unknown preset") {
            return Err(Error::InvalidArgument(format!(
                "unknown name_template preset; known presets: {}",
                NameTemplate::PRESETS.join(", ")
            )));
        }
        for role in Role::LAYER_ROLES {
            if !self.name_template.pattern(role).contains(LAYER_PLACEHOLDER) {
                return Err(Error::InvalidArgument(format!(
                    "pattern for {role} lacks the {LAYER_PLACEHOLDER} placeholder"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_by_name_in_json() {
        let text = r#"{"num_layers":2,"emb_dim":8,"num_heads":4,"kv_heads":2,"head_dim":2,
            "intermediate_dim":16,"vocab_size":32,"name_template":"llama"}"#;
        let a = ArchSpec::from_json(text).unwrap();
        assert_eq!(a.name_template.layout, Layout::OutIn);
        assert_eq!(
            a.name_template.key(Role::Up, Some(1)),
            "model.layers.1.mlp.up_proj.weight"
        );
    }

    #[test]
    fn explicit_template_round_trips() {
        let a = ArchSpec::toy();
        let back = ArchSpec::from_json(&a.to_json()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn gqa_dimensions() {
        let a = ArchSpec::toy();
        assert_eq!(a.shape(Role::Q), (8, 8));
        assert_eq!(a.shape(Role::K), (8, 4));
        assert_eq!(a.shape(Role::O), (8, 8));
        assert_eq!(a.shape(Role::Down), (16, 8));
        assert_eq!(a.queries_per_head(), 2);
    }

    #[test]
    fn rejects_bad_grouping() {
        let mut a = ArchSpec::toy();
        a.kv_heads = 3;
        assert!(a.validate().is_err());
    }

    #[test]
    fn rejects_unknown_preset() {
        let text = r#"{"num_layers":1,"emb_dim":2,"num_heads":1,"kv_heads":1,"head_dim":2,
            "intermediate_dim":2,"vocab_size":4,"name_template":"gpt9"}"#;
        assert!(ArchSpec::from_json(text).is_err());
    }

    #[test]
    fn missing_placeholder() {
        let mut a = ArchSpec::toy();
        a.name_template.q = "q".into();
        assert!(a.validate().is_err());
    }
}
