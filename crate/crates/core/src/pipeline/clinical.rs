use serde::{Deserialize, Serialize};

use super::prepare::PreparedCase;
use super::{ClinicalSetting, PipelineError, Stage};
use crate::activation::CoverageReport;
use crate::lead::normalize_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Sin,
    Dx,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Sin => "sin",
            Side::Dx => "dx",
        }
    }
}

/// One clinically programmed lead of the reference cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSetting {
    pub patient: String,
    pub side: Side,
    /// Normalized labels; empty when the lead is not stimulating.
    pub contacts: Vec<String>,
    /// mA
    pub amplitude: Option<f64>,
}

impl ReferenceSetting {
    pub fn label(&self) -> String {
        format!("Patient {} {}", self.patient, self.side.as_str())
    }

    pub fn to_clinical(&self, pulse_width: Option<f64>) -> ClinicalSetting {
        ClinicalSetting {
            label: Some(self.label()),
            contacts: self.contacts.clone(),
            amplitude: self.amplitude,
            pulse_width,
        }
    }
}

// patient | side | active contacts | amplitude (mA)
const REFERENCE_COHORT: &str = "\
01|sin|2A,2B,2C|2.85
01|dx|2A,2C|3.0
02|sin|2C|1.5
02|dx|2B,2C,3B|4.6
03|sin|3A,3B,3C|4.6
03|dx|3A,3B,3C|3.4
04|sin|2A,2B,2C|2.0
04|dx|3A,3B,3C|2.6
05|sin|3B,3C,4|2.6
05|dx|2A,2B,3A,3B|1.7
06|sin|2C|1.5
06|dx|2B,3B|3.2
07|sin|3B,3C|3.0
07|dx|2B,3C|1.2
08|sin|2A,2B,2C|3.3
08|dx|3A,3B,3C|4.4
09|sin|-|
09|dx|2A|3.8
10|sin|C2A,C2B,C3A,C3B|4.2
10|dx|2A,2B,2C|1.0
";

/// Parse a contact list (`2A,2B`, `C2A`, or `-` for none) and an amplitude
/// cell (blank for none).
pub fn parse_setting(contacts: &str, amplitude: &str) -> Result<(Vec<String>, Option<f64>), String> {
    let contacts = contacts.trim();
    let labels: Vec<String> = if contacts.is_empty() || contacts == "-" {
        Vec::new()
    } else {
        contacts
            .split(',')
            .map(|s| normalize_label(s.trim()))
            .collect()
    };
    if labels.iter().any(|l| l.is_empty()) {
        return Err(format!("empty contact label in `{contacts}`"));
    }
    let amplitude = amplitude.trim();
    let amp = if amplitude.is_empty() {
        None
    } else {
        let v: f64 = amplitude
            .parse()
            .map_err(|_| format!("invalid amplitude `{amplitude}`"))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(format!("amplitude must be >= 0, got {v}"));
        }
        Some(v)
    };
    if labels.is_empty() != amp.is_none() {
        return Err("contacts and amplitude must be given together".into());
    }
    Ok((labels, amp))
}

/// Clinically active settings of the 10-patient, 19-lead reference cohort
/// (one row per hemisphere; one hemisphere is not implanted).
pub fn reference_cohort_settings() -> Vec<ReferenceSetting> {
    REFERENCE_COHORT
        .lines()
        .map(|line| {
            let cells: Vec<&str> = line.split('|').collect();
            let (contacts, amplitude) = parse_setting(cells[2], cells[3]).expect("embedded settings are valid");
            ReferenceSetting {
                patient: cells[0].to_string(),
                side: if cells[1] == "sin" { Side::Sin } else { Side::Dx },
                contacts,
                amplitude,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStatus {
    Evaluated,
    Skipped,
}

/// Coverage of a clinically programmed setting. Clinical settings are a
/// reference point for comparison, not ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalReplay {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub status: ReplayStatus,
    pub note: String,
    pub contacts: Vec<String>,
    /// mA
    pub amplitude: Option<f64>,
    /// µs
    pub pulse_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
}

pub(crate) const REFERENCE_NOTE: &str = "clinical setting used as a reference point, not as ground truth";

pub(crate) fn replay(prepared: &PreparedCase, setting: &ClinicalSetting) -> Result<ClinicalReplay, PipelineError> {
    let spec = &prepared.case.optimization;
    let pulse_width = setting.pulse_width.unwrap_or(spec.thresholds.reference_pulse_width);
    let contacts: Vec<String> = setting.contacts.iter().map(|c| normalize_label(c)).collect();
    let base = ClinicalReplay {
        label: setting.label.clone(),
        status: ReplayStatus::Skipped,
        note: REFERENCE_NOTE.to_string(),
        contacts: contacts.clone(),
        amplitude: setting.amplitude,
        pulse_width,
        coverage: None,
    };
    if contacts.is_empty() {
        log::info!("clinical replay skipped: no active contacts");
        return Ok(ClinicalReplay {
            note: format!("no active contacts; replay skipped ({REFERENCE_NOTE})"),
            ..base
        });
    }
    let config = prepared
        .lead
        .configuration(&contacts)
        .map_err(|e| PipelineError::validation(Stage::Replay, e.to_string()))?;
    let amplitude = setting
        .amplitude
        .ok_or_else(|| PipelineError::validation(Stage::Replay, "clinical amplitude is missing"))?;
    let thresholds = spec.thresholds.with_pulse_width(pulse_width);
    let coverage = prepared
        .evaluate(&config, amplitude, spec, &thresholds)
        .map_err(|e| PipelineError::optimize(Stage::Replay, e))?;
    Ok(ClinicalReplay {
        status: ReplayStatus::Evaluated,
        coverage: Some(coverage),
        ..base
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lead::builtin_lead;

    #[test]
    fn reference_settings_parse() {
        let rows = reference_cohort_settings();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows.iter().filter(|r| !r.contacts.is_empty()).count(), 19);
        assert_eq!(rows[0].contacts, vec!["2A", "2B", "2C"]);
        assert_eq!(rows[0].amplitude, Some(2.85));
        let blank = &rows[16];
        assert_eq!(blank.label(), "Patient 09 sin");
        assert!(blank.contacts.is_empty() && blank.amplitude.is_none());
        assert_eq!(rows[18].contacts, vec!["2A", "2B", "3A", "3B"]);
        let lead = builtin_lead("abbott_infinity_directional").unwrap();
        for r in rows.iter().filter(|r| !r.contacts.is_empty()) {
            lead.configuration(&r.contacts).unwrap();
        }
    }

    #[test]
    fn setting_cells() {
        assert_eq!(parse_setting(" C3B , 4 ", "2.6").unwrap(), (vec!["3B".into(), "4".into()], Some(2.6)));
        assert_eq!(parse_setting("-", "").unwrap(), (vec![], None));
        assert!(parse_setting("2A", "").is_err());
        assert!(parse_setting("2A", "x").is_err());
        assert!(parse_setting("2A,,2B", "1").is_err());
        assert!(parse_setting("2A", "-1").is_err());
    }
}
