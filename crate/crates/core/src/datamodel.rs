//! Instances, views, provenance-tracked synthetic pools and the
//! line-delimited dataset format.
//!
//! A dataset file is one schema record followed by one instance record per
//! line. Inside an instance, views are addressed by id: the real view is id
//! `0` and `synthetic_views[k]` is id `k + 1`. A synthetic view's
//! `parent_id` always points at a smaller id.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl Label {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityPair {
    pub subject: u32,
    pub object: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// The real-data modality (the side training data comes from).
    U,
    /// The synthetic modality produced by `U → V` generation.
    V,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::U => write!(f, "U"),
            Modality::V => write!(f, "V"),
        }
    }
}

/// Payload of a view: a symbol sequence or a dense vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "lowercase")]
pub enum ViewData {
    Discrete(Vec<u32>),
    Vector(Vec<f64>),
}

impl ViewData {
    /// Fixed featurization: vectors pass through, symbol sequences become
    /// normalized symbol counts over the alphabet.
    pub fn features(&self, spec: &ViewSpec) -> Vec<f64> {
        match (self, spec) {
            (ViewData::Vector(v), _) => v.clone(),
            (ViewData::Discrete(s), ViewSpec::Discrete { alphabet }) => {
                let mut counts = vec![0.0; *alphabet];
                for &sym in s {
                    if let Some(c) = counts.get_mut(sym as usize) {
                        *c += 1.0;
                    }
                }
                if !s.is_empty() {
                    let n = s.len() as f64;
                    counts.iter_mut().for_each(|c| *c /= n);
                }
                counts
            }
            (ViewData::Discrete(s), ViewSpec::Vector { .. }) => s.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn matches(&self, spec: &ViewSpec) -> bool {
        self.mismatch(spec).is_none()
    }

    fn mismatch(&self, spec: &ViewSpec) -> Option<&'static str> {
        match (self, spec) {
            (ViewData::Vector(v), ViewSpec::Vector { dim }) => {
                if v.len() != *dim {
                    Some("dimension mismatch")
                } else if v.iter().any(|x| !x.is_finite()) {
                    Some("non-finite value")
                } else {
                    None
                }
            }
            (ViewData::Discrete(s), ViewSpec::Discrete { alphabet }) => {
                if s.iter().any(|&x| x as usize >= *alphabet) {
                    Some("symbol out of alphabet")
                } else {
                    None
                }
            }
            _ => Some("view kind mismatch"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub modality: Modality,
    pub data: ViewData,
}

impl View {
    pub fn u(data: ViewData) -> Self {
        Self { modality: Modality::U, data }
    }

    pub fn v(data: ViewData) -> Self {
        Self { modality: Modality::V, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ViewSpec {
    Discrete { alphabet: usize },
    Vector { dim: usize },
}

impl ViewSpec {
    /// Length of [`ViewData::features`] for views of this spec.
    pub fn feature_dim(&self) -> usize {
        match *self {
            ViewSpec::Discrete { alphabet } => alphabet,
            ViewSpec::Vector { dim } => dim,
        }
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewSpec::Discrete { alphabet } => write!(f, "discrete({alphabet})"),
            ViewSpec::Vector { dim } => write!(f, "vector({dim})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    #[serde(rename = "u_to_v")]
    UToV,
    #[serde(rename = "v_to_u")]
    VToU,
}

impl Step {
    pub fn output(self) -> Modality {
        match self {
            Step::UToV => Modality::V,
            Step::VToU => Modality::U,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticView {
    pub view: View,
    pub round: u32,
    pub step: Step,
    pub parent_id: usize,
    pub teacher_loss: Option<f64>,
    pub selected: bool,
    /// Last selection round this view survived; `None` if it never survived one.
    pub kept_through: Option<u32>,
}

impl SyntheticView {
    pub fn new(data: ViewData, round: u32, step: Step, parent_id: usize) -> Self {
        Self {
            view: View { modality: step.output(), data },
            round,
            step,
            parent_id,
            teacher_loss: None,
            selected: false,
            kept_through: None,
        }
    }

    pub fn is_v_side(&self) -> bool {
        self.step == Step::UToV
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub label: Label,
    pub entities: EntityPair,
    pub real_view: View,
    /// Real view in the synthetic modality; only multimodal test instances carry one.
    pub paired_view: Option<View>,
    pub synthetic_pool: Vec<SyntheticView>,
}

impl Instance {
    /// View by in-instance id (`0` is the real view).
    pub fn view_by_id(&self, id: usize) -> Option<&View> {
        if id == 0 {
            Some(&self.real_view)
        } else {
            self.synthetic_pool.get(id - 1).map(|s| &s.view)
        }
    }

    /// Number of parent hops from synthetic view `id` back to the real view.
    pub fn ancestry_depth(&self, id: usize) -> Option<usize> {
        let mut cur = id;
        let mut hops = 0;
        while cur != 0 {
            let sv = self.synthetic_pool.get(cur.checked_sub(1)?)?;
            if sv.parent_id >= cur {
                return None;
            }
            cur = sv.parent_id;
            hops += 1;
        }
        Some(hops)
    }

    /// Ids of V-side synthetic views.
    pub fn v_view_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.synthetic_pool.iter().enumerate().filter(|(_, s)| s.is_v_side()).map(|(k, _)| k + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub class_count: usize,
    pub entity_vocab: usize,
    pub u_spec: ViewSpec,
    pub v_spec: ViewSpec,
    pub none_class: Option<Label>,
}

impl DatasetSchema {
    pub fn spec_for(&self, m: Modality) -> &ViewSpec {
        match m {
            Modality::U => &self.u_spec,
            Modality::V => &self.v_spec,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub instance_id: Option<u64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instance_id {
            Some(id) => write!(f, "instance {id}: {}", self.message),
            None => write!(f, "schema: {}", self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, message: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(message))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate_dataset(dataset: &[Instance], schema: &DatasetSchema) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |id: Option<u64>, msg: String| report.violations.push(Violation { instance_id: id, message: msg });

    if schema.class_count < 2 {
        push(None, "class_count must be at least 2".into());
    }
    if schema.entity_vocab < 1 || schema.u_spec.feature_dim() < 1 || schema.v_spec.feature_dim() < 1 {
        push(None, "dimensions must be at least 1".into());
    }
    if let Some(nc) = schema.none_class {
        if nc.index() >= schema.class_count {
            push(None, "none_class out of range".into());
        }
    }

    let mut seen = HashSet::new();
    for inst in dataset {
        let id = Some(inst.id);
        if !seen.insert(inst.id) {
            push(id, "duplicate instance id".into());
        }
        if inst.label.index() >= schema.class_count {
            push(id, "label out of range".into());
        }
        if inst.entities.subject as usize >= schema.entity_vocab || inst.entities.object as usize >= schema.entity_vocab
        {
            push(id, "entity id out of range".into());
        }
        if inst.real_view.modality != Modality::U {
            push(id, "real view must be U-side".into());
        }
        if let Some(m) = inst.real_view.data.mismatch(&schema.u_spec) {
            push(id, format!("real view: {m}"));
        }
        if let Some(p) = &inst.paired_view {
            if p.modality != Modality::V {
                push(id, "paired view must be V-side".into());
            }
            if let Some(m) = p.data.mismatch(&schema.v_spec) {
                push(id, format!("paired view: {m}"));
            }
        }
        for (k, sv) in inst.synthetic_pool.iter().enumerate() {
            let vid = k + 1;
            if sv.view.modality != sv.step.output() {
                push(id, format!("view {vid}: modality does not match step"));
            }
            if let Some(m) = sv.view.data.mismatch(schema.spec_for(sv.step.output())) {
                push(id, format!("view {vid}: {m}"));
            }
            if sv.parent_id >= vid {
                push(id, format!("view {vid}: parent {} does not resolve to an earlier view", sv.parent_id));
                continue;
            }
            let parent_modality = inst.view_by_id(sv.parent_id).map(|v| v.modality);
            let expected = match sv.step {
                Step::UToV => Modality::U,
                Step::VToU => Modality::V,
            };
            if parent_modality != Some(expected) {
                push(id, format!("view {vid}: parent modality does not feed step"));
            }
            if sv.parent_id > 0 && inst.synthetic_pool[sv.parent_id - 1].round > sv.round {
                push(id, format!("view {vid}: parent from a later round"));
            }
            match inst.ancestry_depth(vid) {
                Some(d) if d <= 2 * (sv.round as usize + 1) => {}
                _ => push(id, format!("view {vid}: ancestry exceeds 2*(round+1) hops")),
            }
            if let Some(l) = sv.teacher_loss {
                if !(l.is_finite() && l >= 0.0) {
                    push(id, format!("view {vid}: teacher loss must be finite and non-negative"));
                }
            }
            if sv.selected && sv.kept_through.is_none() {
                push(id, format!("view {vid}: selected without a surviving round"));
            }
            if let Some(r) = sv.kept_through {
                if r < sv.round {
                    push(id, format!("view {vid}: kept before it was generated"));
                }
            }
        }
    }
    report
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset failed validation:\n{0}")]
    Validation(ValidationReport),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// Wire records. Field order here is the on-disk key order.

#[derive(Serialize, Deserialize)]
struct SchemaRecord {
    version: u32,
    class_count: usize,
    entity_vocab: usize,
    u_spec: ViewSpec,
    v_spec: ViewSpec,
    none_class: Option<Label>,
}

#[derive(Serialize, Deserialize)]
struct SyntheticRecord {
    round: u32,
    step: Step,
    parent_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    teacher_loss: Option<f64>,
    selected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kept_through: Option<u32>,
    view: ViewData,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: u64,
    label: Label,
    subject: u32,
    object: u32,
    real_view: ViewData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paired_view: Option<ViewData>,
    synthetic_views: Vec<SyntheticRecord>,
}

impl From<&Instance> for InstanceRecord {
    fn from(inst: &Instance) -> Self {
        Self {
            id: inst.id,
            label: inst.label,
            subject: inst.entities.subject,
            object: inst.entities.object,
            real_view: inst.real_view.data.clone(),
            paired_view: inst.paired_view.as_ref().map(|v| v.data.clone()),
            synthetic_views: inst
                .synthetic_pool
                .iter()
                .map(|s| SyntheticRecord {
                    round: s.round,
                    step: s.step,
                    parent_id: s.parent_id,
                    teacher_loss: s.teacher_loss,
                    selected: s.selected,
                    kept_through: s.kept_through,
                    view: s.view.data.clone(),
                })
                .collect(),
        }
    }
}

impl From<InstanceRecord> for Instance {
    fn from(r: InstanceRecord) -> Self {
        Self {
            id: r.id,
            label: r.label,
            entities: EntityPair { subject: r.subject, object: r.object },
            real_view: View::u(r.real_view),
            paired_view: r.paired_view.map(View::v),
            synthetic_pool: r
                .synthetic_views
                .into_iter()
                .map(|s| SyntheticView {
                    view: View { modality: s.step.output(), data: s.view },
                    round: s.round,
                    step: s.step,
                    parent_id: s.parent_id,
                    teacher_loss: s.teacher_loss,
                    selected: s.selected,
                    kept_through: s.kept_through,
                })
                .collect(),
        }
    }
}

/// Write `schema` and `dataset` as line-delimited JSON records.
pub fn write_dataset<W: Write>(dataset: &[Instance], schema: &DatasetSchema, mut sink: W) -> Result<(), DataError> {
    let report = validate_dataset(dataset, schema);
    if !report.is_ok() {
        return Err(DataError::Validation(report));
    }
    let header = SchemaRecord {
        version: FORMAT_VERSION,
        class_count: schema.class_count,
        entity_vocab: schema.entity_vocab,
        u_spec: schema.u_spec,
        v_spec: schema.v_spec,
        none_class: schema.none_class,
    };
    let to_io = |e: serde_json::Error| DataError::Io(std::io::Error::other(e));
    serde_json::to_writer(&mut sink, &header).map_err(to_io)?;
    sink.write_all(b"\n")?;
    for inst in dataset {
        serde_json::to_writer(&mut sink, &InstanceRecord::from(inst)).map_err(to_io)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(source: R) -> Result<(Vec<Instance>, DatasetSchema), DataError> {
    let mut lines = source.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Parse { line: 1, message: "missing schema header".into() })?;
    let header: SchemaRecord =
        serde_json::from_str(&header?).map_err(|e| DataError::Parse { line: 1, message: e.to_string() })?;
    if header.version != FORMAT_VERSION {
        return Err(DataError::Version(header.version));
    }
    let schema = DatasetSchema {
        class_count: header.class_count,
        entity_vocab: header.entity_vocab,
        u_spec: header.u_spec,
        v_spec: header.v_spec,
        none_class: header.none_class,
    };
    let mut dataset = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse { line: idx + 1, message: e.to_string() })?;
        dataset.push(Instance::from(rec));
    }
    let report = validate_dataset(&dataset, &schema);
    if !report.is_ok() {
        return Err(DataError::Validation(report));
    }
    Ok((dataset, schema))
}

pub fn dataset_to_string(dataset: &[Instance], schema: &DatasetSchema) -> Result<String, DataError> {
    let mut buf = Vec::new();
    write_dataset(dataset, schema, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
