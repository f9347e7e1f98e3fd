use serde::{Deserialize, Serialize};

use super::{GapRule, ProtocolConfig, ProtocolError};

/// A seizure in absolute seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeizureEvent {
    pub onset: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeizureCluster {
    pub lead_onset: f64,
    /// Offset of the last member.
    pub end: f64,
    pub members: Vec<SeizureEvent>,
}

/// Greedy left-to-right grouping: a seizure joins the open cluster when its gap
/// to the previous member is below `cluster_gap_s`.
pub fn cluster_seizures(events: &[SeizureEvent], cfg: &ProtocolConfig) -> Result<Vec<SeizureCluster>, ProtocolError> {
    for (i, e) in events.iter().enumerate() {
        let sorted = i == 0 || events[i - 1].onset < e.onset;
        if !(e.onset < e.offset) || !sorted {
            return Err(ProtocolError::Unsorted {
                index: i,
                onset: e.onset,
                offset: e.offset,
            });
        }
    }
    let mut out: Vec<SeizureCluster> = Vec::new();
    for e in events {
        if let Some(c) = out.last_mut() {
            let prev = c.members.last().expect("clusters are never empty");
            let gap = match cfg.gap_rule {
                GapRule::OffsetToOnset => e.onset - prev.offset,
                GapRule::OnsetToOnset => e.onset - prev.onset,
            };
            if gap < cfg.cluster_gap_s {
                c.end = c.end.max(e.offset);
                c.members.push(*e);
                continue;
            }
        }
        out.push(SeizureCluster {
            lead_onset: e.onset,
            end: e.offset,
            members: vec![*e],
        });
    }
    Ok(out)
}
