use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{Timestamp, UserId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Integer,
    Float,
    Text,
    Boolean,
    List,
    Object,
}

impl FieldType {
    fn matches(self, v: &Value) -> bool {
        match self {
            FieldType::Integer => v.is_i64() || v.is_u64(),
            FieldType::Float => v.is_number(),
            FieldType::Text => v.is_string(),
            FieldType::Boolean => v.is_boolean(),
            FieldType::List => v.is_array(),
            FieldType::Object => v.is_object(),
        }
    }

    fn describe(v: &Value) -> &'static str {
        match v {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Number(n) if n.is_f64() => "float",
            Value::Number(_) => "integer",
            Value::String(_) => "text",
            Value::Array(_) => "list",
            Value::Object(_) => "object",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub field_type: FieldType,
    pub required: bool,
}

impl FieldSpec {
    pub fn required(name: &str, field_type: FieldType) -> Self {
        FieldSpec {
            name: name.into(),
            field_type,
            required: true,
        }
    }

    pub fn optional(name: &str, field_type: FieldType) -> Self {
        FieldSpec {
            name: name.into(),
            field_type,
            required: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    /// Assigned by the registry on registration.
    pub version: u32,
    pub fields: Vec<FieldSpec>,
    pub created_at: Timestamp,
}

impl FeatureSchema {
    pub fn new(name: &str, fields: Vec<FieldSpec>, created_at: Timestamp) -> Self {
        FeatureSchema {
            name: name.into(),
            version: 0,
            fields,
            created_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub user: UserId,
    pub schema: String,
    pub version: u32,
    pub as_of: Timestamp,
    pub payload: Value,
}

/// Versioned schema catalog. Reads are concurrent, writes serialized.
#[derive(Debug, Default)]
pub struct FeatureRegistry {
    schemas: RwLock<BTreeMap<String, Vec<FeatureSchema>>>,
}

impl FeatureRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the schema under the next version for its name (1 for a new
    /// name, whatever version was submitted) and returns that version.
    pub fn register(&self, mut schema: FeatureSchema) -> Result<u32> {
        if schema.name.trim().is_empty() {
            return Err(Error::SchemaInvalid("schema name is empty".into()));
        }
        if schema.fields.is_empty() {
            return Err(Error::SchemaInvalid(format!("schema `{}` has no fields", schema.name)));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = schema.fields.iter().find(|f| !seen.insert(f.name.as_str())) {
            return Err(Error::SchemaInvalid(format!("field `{}` declared twice", dup.name)));
        }
        let mut schemas = self.schemas.write().expect("registry lock poisoned");
        let versions = schemas.entry(schema.name.clone()).or_default();
        schema.version = versions.len() as u32 + 1;
        versions.push(schema.clone());
        Ok(schema.version)
    }

    pub fn get(&self, name: &str, version: u32) -> Result<FeatureSchema> {
        let schemas = self.schemas.read().expect("registry lock poisoned");
        let versions = schemas
            .get(name)
            .ok_or_else(|| Error::UnknownSchema(name.into()))?;
        version
            .checked_sub(1)
            .and_then(|i| versions.get(i as usize))
            .cloned()
            .ok_or_else(|| Error::UnknownVersion {
                name: name.into(),
                version,
            })
    }

    pub fn latest(&self, name: &str) -> Result<FeatureSchema> {
        let schemas = self.schemas.read().expect("registry lock poisoned");
        schemas
            .get(name)
            .and_then(|v| v.last())
            .cloned()
            .ok_or_else(|| Error::UnknownSchema(name.into()))
    }

    pub fn versions(&self, name: &str) -> Vec<u32> {
        let schemas = self.schemas.read().expect("registry lock poisoned");
        schemas
            .get(name)
            .map(|v| v.iter().map(|s| s.version).collect())
            .unwrap_or_default()
    }

    /// Accepts the record iff every required field is present and every
    /// declared field present has the declared type.
    pub fn validate(&self, record: &FeatureRecord) -> Result<()> {
        let schema = self.get(&record.schema, record.version)?;
        let payload = record
            .payload
            .as_object()
            .ok_or_else(|| Error::TypeMismatch {
                field: "<payload>".into(),
                expected: "object".into(),
                found: FieldType::describe(&record.payload).into(),
            })?;
        for field in &schema.fields {
            match payload.get(&field.name) {
                None | Some(Value::Null) if field.required => {
                    return Err(Error::MissingField(field.name.clone()))
                }
                None | Some(Value::Null) => {}
                Some(v) if !field.field_type.matches(v) => {
                    return Err(Error::TypeMismatch {
                        field: field.name.clone(),
                        expected: format!("{:?}", field.field_type).to_lowercase(),
                        found: FieldType::describe(v).into(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Vec<FeatureSchema>> {
        self.schemas.read().expect("registry lock poisoned").clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.snapshot()).expect("registry serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schemas = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.into(),
            line: 1,
            source,
        })?;
        Ok(FeatureRegistry {
            schemas: RwLock::new(schemas),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            "hybrid_seq",
            vec![
                FieldSpec::required("user", FieldType::Integer),
                FieldSpec::required("tokens", FieldType::List),
                FieldSpec::optional("note", FieldType::Text),
            ],
            0,
        )
    }

    fn record(version: u32, payload: Value) -> FeatureRecord {
        FeatureRecord {
            user: 1,
            schema: "hybrid_seq".into(),
            version,
            as_of: 10,
            payload,
        }
    }

    #[test]
    fn versions_are_monotone() {
        let reg = FeatureRegistry::new();
        let mut s = schema();
        s.version = 42;
        assert_eq!(reg.register(s).unwrap(), 1);
        assert_eq!(reg.register(schema()).unwrap(), 2);
        assert_eq!(reg.get("hybrid_seq", 1).unwrap().version, 1);
        assert_eq!(reg.latest("hybrid_seq").unwrap().version, 2);
        assert_eq!(reg.versions("hybrid_seq"), vec![1, 2]);
    }

    #[test]
    fn invalid_schemas() {
        let reg = FeatureRegistry::new();
        assert!(matches!(
            reg.register(FeatureSchema::new("x", vec![], 0)),
            Err(Error::SchemaInvalid(_))
        ));
        assert!(reg.register(FeatureSchema::new(" ", schema().fields, 0)).is_err());
        let dup = vec![
            FieldSpec::required("a", FieldType::Integer),
            FieldSpec::required("a", FieldType::Text),
        ];
        assert!(reg.register(FeatureSchema::new("x", dup, 0)).is_err());
        assert!(reg.versions("x").is_empty());
    }

    #[test]
    fn record_validation_errors_are_distinct() {
        let reg = FeatureRegistry::new();
        reg.register(schema()).unwrap();
        reg.validate(&record(1, json!({"user": 1, "tokens": []}))).unwrap();
        reg.validate(&record(1, json!({"user": 1, "tokens": [], "note": "x"}))).unwrap();
        assert!(matches!(
            reg.validate(&record(1, json!({"user": 1}))),
            Err(Error::MissingField(f)) if f == "tokens"
        ));
        assert!(matches!(
            reg.validate(&record(99, json!({"user": 1, "tokens": []}))),
            Err(Error::UnknownVersion { version: 99, .. })
        ));
        assert!(matches!(
            reg.validate(&record(1, json!({"user": "one", "tokens": []}))),
            Err(Error::TypeMismatch { .. })
        ));
        let mut other = record(1, json!({}));
        other.schema = "nope".into();
        assert!(matches!(reg.validate(&other), Err(Error::UnknownSchema(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let reg = FeatureRegistry::new();
        reg.register(schema()).unwrap();
        let path = dir.path().join("registry.json");
        reg.save(&path).unwrap();
        assert_eq!(FeatureRegistry::load(&path).unwrap().snapshot(), reg.snapshot());
    }
}
