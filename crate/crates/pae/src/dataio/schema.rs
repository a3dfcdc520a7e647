//! Attribute-schema document (TOML).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributeDef, AttributeSchema, DataError};

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SchemaDoc {
    schema_version: u32,
    name: String,
    #[serde(rename = "attribute")]
    attributes: Vec<AttributeDoc>,
    attacks: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttributeDoc {
    name: String,
    values: Vec<String>,
}

pub fn load_schema(path: &Path) -> Result<AttributeSchema, DataError> {
    let text = std::fs::read_to_string(path)?;
    let doc: SchemaDoc = toml::from_str(&text).map_err(|e| DataError::SchemaParse(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(DataError::UnsupportedVersion(doc.schema_version));
    }
    let attributes = doc
        .attributes
        .into_iter()
        .map(|a| AttributeDef {
            name: a.name,
            values: a.values,
        })
        .collect();
    AttributeSchema::new(doc.name, attributes, doc.attacks)
}

pub fn to_canonical_toml(schema: &AttributeSchema) -> String {
    let doc = SchemaDoc {
        schema_version: SCHEMA_VERSION,
        name: schema.name().to_string(),
        attributes: schema
            .attributes()
            .iter()
            .map(|a| AttributeDoc {
                name: a.name.clone(),
                values: a.values.clone(),
            })
            .collect(),
        attacks: schema
            .attack_labels()
            .map(|label| {
                let row = schema.attack_values(label).unwrap();
                let names = row
                    .iter()
                    .enumerate()
                    .map(|(l, &m)| schema.attributes()[l].values[m].clone())
                    .collect();
                (label.to_string(), names)
            })
            .collect(),
    };
    toml::to_string(&doc).expect("schema serialization cannot fail")
}
