//! Normalization of compressed records into Common Base Event style XML.
//!
//! Each record becomes one `<CommonBaseEvent>` element carrying the
//! mandatory attributes (creationTime, severity, msg, sourceComponentId)
//! plus one `<extendedDataElement>` per variable, per level-1 metadata
//! field, and one named `templateId` holding the level-2 identifier.

use chrono::{SecondsFormat, TimeZone, Utc};

use crate::identity::EndpointId;

use super::templates::{Record, TemplateDictionary};
use super::PipelineError;

/// Severity assigned to lines that carry no syslog priority.
pub const DEFAULT_SEVERITY: u8 = 30;

/// How complete the harvested stream is believed to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataQuality {
    Complete,
    Gapped,
    Unknown,
}

impl DataQuality {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataQuality::Complete => "complete",
            DataQuality::Gapped => "gapped",
            DataQuality::Unknown => "unknown",
        }
    }
}

/// Level-1 metadata: descriptive context attached per batch.
#[derive(Debug, Clone)]
pub struct MetadataL1 {
    pub device_type: String,
    pub geo_location: String,
    pub data_quality: DataQuality,
    pub harvest_conditions: String,
    /// Receipt time corrected by the session clock offset, UTC ms.
    pub harvest_time_ms: u64,
}

/// Per-device descriptive configuration, when the operator supplied any.
#[derive(Debug, Clone, Default)]
pub struct DeviceMeta {
    pub device_type: Option<String>,
    pub geo_location: Option<String>,
}

/// Build the five-field level-1 record for a batch received at
/// `receipt_ms` over a session with the given clock offset. Unconfigured
/// fields fall back to "unknown", and so does the data quality.
pub fn attach_metadata_l1(
    meta: Option<&DeviceMeta>,
    receipt_ms: u64,
    clock_offset_ms: i64,
    harvest_conditions: &str,
) -> MetadataL1 {
    let harvest_time_ms = receipt_ms.saturating_add_signed(clock_offset_ms);
    match meta {
        Some(m) => MetadataL1 {
            device_type: m.device_type.clone().unwrap_or_else(|| "unknown".into()),
            geo_location: m.geo_location.clone().unwrap_or_else(|| "unknown".into()),
            data_quality: DataQuality::Complete,
            harvest_conditions: harvest_conditions.to_string(),
            harvest_time_ms,
        },
        None => MetadataL1 {
            device_type: "unknown".into(),
            geo_location: "unknown".into(),
            data_quality: DataQuality::Unknown,
            harvest_conditions: harvest_conditions.to_string(),
            harvest_time_ms,
        },
    }
}

/// One normalized event.
#[derive(Debug, Clone)]
pub struct CbeEvent {
    pub creation_time_ms: u64,
    /// 0..=70, mapped from the syslog priority when the line carries one.
    pub severity: u8,
    pub source_component_id: EndpointId,
    pub msg: String,
    /// Level-2 identifier referring into the batch dictionary.
    pub template_id: u32,
    pub variables: Vec<String>,
    pub metadata: MetadataL1,
}

/// Map a syslog severity (0 = emergency .. 7 = debug) onto the 0..=70
/// event scale, most severe highest, clamped into range.
pub fn severity_from_syslog(syslog_severity: u8) -> u8 {
    let s = syslog_severity.min(7) as u16;
    ((8 - s) * 10).min(70) as u8
}

/// Extract the syslog severity from a leading `<PRI>` header, if present.
fn sniff_syslog_severity(line: &str) -> Option<u8> {
    let rest = line.strip_prefix('<')?;
    let end = rest.find('>')?;
    if end == 0 || end > 3 {
        return None;
    }
    let pri: u16 = rest[..end].parse().ok()?;
    if pri > 191 {
        return None;
    }
    Some((pri % 8) as u8)
}

/// Normalize one record into an event. The `msg` attribute carries the
/// reconstructed line; metadata fields must all be present.
pub fn normalize_to_cbe(
    record: &Record,
    dict: &TemplateDictionary,
    metadata: &MetadataL1,
    device_id: EndpointId,
) -> Result<CbeEvent, PipelineError> {
    if metadata.device_type.is_empty()
        || metadata.geo_location.is_empty()
        || metadata.harvest_conditions.is_empty()
    {
        return Err(PipelineError::Validation(
            "level-1 metadata fields must be populated".into(),
        ));
    }
    let template = dict.template(record.template_id).ok_or_else(|| {
        PipelineError::Corruption(format!("unknown template id {}", record.template_id))
    })?;
    let msg = template.render(&record.variables)?;
    let severity = sniff_syslog_severity(&msg)
        .map(severity_from_syslog)
        .unwrap_or(DEFAULT_SEVERITY);
    Ok(CbeEvent {
        creation_time_ms: metadata.harvest_time_ms,
        severity,
        source_component_id: device_id,
        msg,
        template_id: record.template_id,
        variables: record.variables.clone(),
        metadata: metadata.clone(),
    })
}

impl CbeEvent {
    /// Render as one `<CommonBaseEvent>` element.
    pub fn to_xml(&self) -> String {
        let mut out = String::with_capacity(256 + self.msg.len());
        self.write_xml(&mut out);
        out
    }

    fn write_xml(&self, out: &mut String) {
        out.push_str("<CommonBaseEvent creationTime=\"");
        out.push_str(&iso8601(self.creation_time_ms));
        out.push_str("\" severity=\"");
        out.push_str(&self.severity.to_string());
        out.push_str("\" msg=\"");
        escape_into(&self.msg, true, out);
        out.push_str("\" sourceComponentId=\"");
        out.push_str(&self.source_component_id.to_hex());
        out.push_str("\">");
        extended(out, "templateId", &self.template_id.to_string());
        for (i, v) in self.variables.iter().enumerate() {
            extended(out, &format!("var{i}"), v);
        }
        extended(out, "deviceType", &self.metadata.device_type);
        extended(out, "geoLocation", &self.metadata.geo_location);
        extended(out, "dataQuality", self.metadata.data_quality.as_str());
        extended(out, "harvestConditions", &self.metadata.harvest_conditions);
        extended(out, "harvestTime", &iso8601(self.metadata.harvest_time_ms));
        out.push_str("</CommonBaseEvent>");
    }
}

/// Render a batch of events into one `<CommonBaseEvents>` document.
pub fn events_to_xml(events: &[CbeEvent]) -> String {
    let mut out = String::from("<CommonBaseEvents>");
    for event in events {
        event.write_xml(&mut out);
    }
    out.push_str("</CommonBaseEvents>");
    out
}

fn extended(out: &mut String, name: &str, value: &str) {
    out.push_str("<extendedDataElement name=\"");
    escape_into(name, true, out);
    out.push_str("\"><values>");
    escape_into(value, false, out);
    out.push_str("</values></extendedDataElement>");
}

fn iso8601(ms: u64) -> String {
    match Utc.timestamp_millis_opt(ms as i64).single() {
        Some(t) => t.to_rfc3339_opts(SecondsFormat::Millis, true),
        None => "1970-01-01T00:00:00.000Z".to_string(),
    }
}

/// Escape text for XML. In attribute context, tab/newline/CR become
/// character references so parsers do not normalize them away; control
/// characters XML 1.0 cannot carry at all are replaced with U+FFFD.
fn escape_into(s: &str, attribute: bool, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\t' | '\n' | '\r' if attribute => {
                out.push_str(&format!("&#{};", c as u32));
            }
            c if (c as u32) < 0x20 && !matches!(c, '\t' | '\n' | '\r') => {
                out.push('\u{fffd}');
            }
            c => out.push(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::templates::{compress, TemplateDictionary};
    use super::*;

    fn meta() -> MetadataL1 {
        attach_metadata_l1(
            Some(&DeviceMeta {
                device_type: Some("linux-host".into()),
                geo_location: Some("lab-1".into()),
            }),
            1_700_000_000_000,
            0,
            "stream:tcp peer=127.0.0.1:9",
        )
    }

    #[test]
    fn event_carries_msg_and_variables() {
        let corpus = ["Server alpha is down", "Server beta is down"];
        let mut dict = TemplateDictionary::learn(&corpus, 0.6).unwrap();
        let records = compress(&corpus, &mut dict);
        let event = normalize_to_cbe(&records[0], &dict, &meta(), EndpointId::new([5; 20])).unwrap();
        assert_eq!(event.msg, "Server alpha is down");
        let xml = event.to_xml();
        assert!(xml.contains("msg=\"Server alpha is down\""));
        assert!(xml.contains("<extendedDataElement name=\"var0\"><values>alpha</values>"));
        assert!(xml.contains(&format!(
            "<extendedDataElement name=\"templateId\"><values>{}</values>",
            records[0].template_id
        )));

        let doc = roxmltree::Document::parse(&xml).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "CommonBaseEvent");
        for attr in ["creationTime", "severity", "msg", "sourceComponentId"] {
            assert!(root.attribute(attr).is_some(), "missing {attr}");
        }
    }

    #[test]
    fn xml_special_characters_survive_parsing() {
        let lines = ["msg <a&b> \"quoted\" 'single' x=1", "msg <c&d> \"x\" 'y' z=2"];
        let mut dict = TemplateDictionary::learn(&lines, 0.9).unwrap();
        let records = compress(&lines, &mut dict);
        for (i, record) in records.iter().enumerate() {
            let event = normalize_to_cbe(record, &dict, &meta(), EndpointId::new([5; 20])).unwrap();
            let xml = event.to_xml();
            let doc = roxmltree::Document::parse(&xml).unwrap();
            assert_eq!(doc.root_element().attribute("msg"), Some(lines[i]));
        }
    }

    #[test]
    fn control_characters_are_sanitized() {
        let lines = ["bad\u{1}byte here", "tab\there"];
        let mut dict = TemplateDictionary::learn(&lines, 0.9).unwrap();
        let records = compress(&lines, &mut dict);
        for record in &records {
            let event = normalize_to_cbe(record, &dict, &meta(), EndpointId::new([5; 20])).unwrap();
            roxmltree::Document::parse(&event.to_xml()).unwrap();
        }
        // tab in an attribute survives as a character reference
        let event = normalize_to_cbe(&records[1], &dict, &meta(), EndpointId::new([5; 20])).unwrap();
        let xml = event.to_xml();
        let doc = roxmltree::Document::parse(&xml).unwrap();
        assert_eq!(doc.root_element().attribute("msg"), Some("tab\there"));
    }

    #[test]
    fn severity_mapping_clamps_into_range() {
        assert_eq!(severity_from_syslog(7), 10); // debug
        assert_eq!(severity_from_syslog(6), 20); // info
        assert_eq!(severity_from_syslog(1), 70); // alert
        assert_eq!(severity_from_syslog(0), 70); // emergency, clamped
        for s in 0..=7 {
            assert!(severity_from_syslog(s) <= 70);
        }
    }

    #[test]
    fn syslog_priority_sniffing() {
        let lines = ["<13>Oct 11 host daemon: up", "<165>1 2026 something", "plain line", "<9999>no"];
        let mut dict = TemplateDictionary::learn(&lines, 0.9).unwrap();
        let records = compress(&lines, &mut dict);
        let sev: Vec<u8> = records
            .iter()
            .map(|r| {
                normalize_to_cbe(r, &dict, &meta(), EndpointId::new([5; 20]))
                    .unwrap()
                    .severity
            })
            .collect();
        // pri 13 -> severity 5 (notice) -> 30; pri 165 -> severity 5 -> 30
        assert_eq!(sev[0], 30);
        assert_eq!(sev[1], 30);
        assert_eq!(sev[2], DEFAULT_SEVERITY);
        assert_eq!(sev[3], DEFAULT_SEVERITY);
        let crit = ["<10>crit here", "<10>crit there"];
        let mut dict = TemplateDictionary::learn(&crit, 0.9).unwrap();
        let records = compress(&crit, &mut dict);
        let e = normalize_to_cbe(&records[0], &dict, &meta(), EndpointId::new([5; 20])).unwrap();
        assert_eq!(e.severity, severity_from_syslog(2));
    }

    #[test]
    fn metadata_defaults_for_unconfigured_device() {
        let m = attach_metadata_l1(None, 1000, 0, "stream:tcp");
        assert_eq!(m.device_type, "unknown");
        assert_eq!(m.geo_location, "unknown");
        assert_eq!(m.data_quality, DataQuality::Unknown);
    }

    #[test]
    fn harvest_time_applies_clock_offset() {
        // local receipt 1000 s, peer offset +5 s
        let m = attach_metadata_l1(None, 1_000_000, 5_000, "stream:tcp");
        assert_eq!(m.harvest_time_ms, 1_005_000);
        let m = attach_metadata_l1(None, 1_000_000, -250, "stream:tcp");
        assert_eq!(m.harvest_time_ms, 999_750);
    }

    #[test]
    fn batch_document_wraps_events() {
        let lines = ["a b", "c d"];
        let mut dict = TemplateDictionary::learn(&lines, 0.9).unwrap();
        let records = compress(&lines, &mut dict);
        let events: Vec<CbeEvent> = records
            .iter()
            .map(|r| normalize_to_cbe(r, &dict, &meta(), EndpointId::new([5; 20])).unwrap())
            .collect();
        let doc_text = events_to_xml(&events);
        let doc = roxmltree::Document::parse(&doc_text).unwrap();
        assert_eq!(
            doc.root_element().children().filter(|c| c.is_element()).count(),
            2
        );
    }
}
