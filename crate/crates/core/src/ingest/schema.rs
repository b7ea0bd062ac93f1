use serde::{Deserialize, Serialize};

/// Column layout of a flow-record export.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Every column of the export in file order, label included.
    pub column_names: Vec<String>,
    /// Columns excluded from the feature matrix.
    pub dropped_columns: Vec<String>,
    pub label_column: String,
}

/// CIC-FlowMeter export layout (CIC-IDS2018 spelling).
pub const CIC_COLUMNS: [&str; 80] = [
    "Dst Port", "Protocol", "Timestamp", "Flow Duration", "Tot Fwd Pkts", "Tot Bwd Pkts",
    "TotLen Fwd Pkts", "TotLen Bwd Pkts", "Fwd Pkt Len Max", "Fwd Pkt Len Min",
    "Fwd Pkt Len Mean", "Fwd Pkt Len Std", "Bwd Pkt Len Max", "Bwd Pkt Len Min",
    "Bwd Pkt Len Mean", "Bwd Pkt Len Std", "Flow Byts/s", "Flow Pkts/s", "Flow IAT Mean",
    "Flow IAT Std", "Flow IAT Max", "Flow IAT Min", "Fwd IAT Tot", "Fwd IAT Mean",
    "Fwd IAT Std", "Fwd IAT Max", "Fwd IAT Min", "Bwd IAT Tot", "Bwd IAT Mean", "Bwd IAT Std",
    "Bwd IAT Max", "Bwd IAT Min", "Fwd PSH Flags", "Bwd PSH Flags", "Fwd URG Flags",
    "Bwd URG Flags", "Fwd Header Len", "Bwd Header Len", "Fwd Pkts/s", "Bwd Pkts/s",
    "Pkt Len Min", "Pkt Len Max", "Pkt Len Mean", "Pkt Len Std", "Pkt Len Var", "FIN Flag Cnt",
    "SYN Flag Cnt", "RST Flag Cnt", "PSH Flag Cnt", "ACK Flag Cnt", "URG Flag Cnt",
    "CWE Flag Count", "ECE Flag Cnt", "Down/Up Ratio", "Pkt Size Avg", "Fwd Seg Size Avg",
    "Bwd Seg Size Avg", "Fwd Byts/b Avg", "Fwd Pkts/b Avg", "Fwd Blk Rate Avg",
    "Bwd Byts/b Avg", "Bwd Pkts/b Avg", "Bwd Blk Rate Avg", "Subflow Fwd Pkts",
    "Subflow Fwd Byts", "Subflow Bwd Pkts", "Subflow Bwd Byts", "Init Fwd Win Byts",
    "Init Bwd Win Byts", "Fwd Act Data Pkts", "Fwd Seg Size Min", "Active Mean", "Active Std",
    "Active Max", "Active Min", "Idle Mean", "Idle Std", "Idle Max", "Idle Min", "Label",
];

pub const CIC_DROPPED: [&str; 5] = ["Dst Port", "Timestamp", "Flow Byts/s", "Flow Pkts/s", "Label"];

/// Header spellings seen in other CIC exports (mostly CIC-IDS2017), mapped to
/// the canonical names above. Lookup is on the normalised form: trimmed,
/// lower-cased, internal whitespace collapsed.
const ALIASES: &[(&str, &str)] = &[
    ("destination port", "Dst Port"),
    ("total fwd packets", "Tot Fwd Pkts"),
    ("total backward packets", "Tot Bwd Pkts"),
    ("total length of fwd packets", "TotLen Fwd Pkts"),
    ("total length of bwd packets", "TotLen Bwd Pkts"),
    ("fwd packet length max", "Fwd Pkt Len Max"),
    ("fwd packet length min", "Fwd Pkt Len Min"),
    ("fwd packet length mean", "Fwd Pkt Len Mean"),
    ("fwd packet length std", "Fwd Pkt Len Std"),
    ("bwd packet length max", "Bwd Pkt Len Max"),
    ("bwd packet length min", "Bwd Pkt Len Min"),
    ("bwd packet length mean", "Bwd Pkt Len Mean"),
    ("bwd packet length std", "Bwd Pkt Len Std"),
    ("flow bytes/s", "Flow Byts/s"),
    ("flow packets/s", "Flow Pkts/s"),
    ("fwd iat total", "Fwd IAT Tot"),
    ("bwd iat total", "Bwd IAT Tot"),
    ("fwd header length", "Fwd Header Len"),
    ("bwd header length", "Bwd Header Len"),
    ("fwd packets/s", "Fwd Pkts/s"),
    ("bwd packets/s", "Bwd Pkts/s"),
    ("min packet length", "Pkt Len Min"),
    ("max packet length", "Pkt Len Max"),
    ("packet length mean", "Pkt Len Mean"),
    ("packet length std", "Pkt Len Std"),
    ("packet length variance", "Pkt Len Var"),
    ("fin flag count", "FIN Flag Cnt"),
    ("syn flag count", "SYN Flag Cnt"),
    ("rst flag count", "RST Flag Cnt"),
    ("psh flag count", "PSH Flag Cnt"),
    ("ack flag count", "ACK Flag Cnt"),
    ("urg flag count", "URG Flag Cnt"),
    ("ece flag count", "ECE Flag Cnt"),
    ("average packet size", "Pkt Size Avg"),
    ("avg fwd segment size", "Fwd Seg Size Avg"),
    ("avg bwd segment size", "Bwd Seg Size Avg"),
    ("fwd avg bytes/bulk", "Fwd Byts/b Avg"),
    ("fwd avg packets/bulk", "Fwd Pkts/b Avg"),
    ("fwd avg bulk rate", "Fwd Blk Rate Avg"),
    ("bwd avg bytes/bulk", "Bwd Byts/b Avg"),
    ("bwd avg packets/bulk", "Bwd Pkts/b Avg"),
    ("bwd avg bulk rate", "Bwd Blk Rate Avg"),
    ("subflow fwd packets", "Subflow Fwd Pkts"),
    ("subflow fwd bytes", "Subflow Fwd Byts"),
    ("subflow bwd packets", "Subflow Bwd Pkts"),
    ("subflow bwd bytes", "Subflow Bwd Byts"),
    ("init_win_bytes_forward", "Init Fwd Win Byts"),
    ("init_win_bytes_backward", "Init Bwd Win Byts"),
    ("act_data_pkt_fwd", "Fwd Act Data Pkts"),
    ("min_seg_size_forward", "Fwd Seg Size Min"),
];

pub(crate) fn normalize_header(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl FeatureSchema {
    pub fn cic() -> Self {
        Self {
            column_names: CIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
            dropped_columns: CIC_DROPPED.iter().map(|s| s.to_string()).collect(),
            label_column: "Label".into(),
        }
    }

    /// Feature names in matrix column order.
    pub fn feature_names(&self) -> Vec<&str> {
        self.column_names
            .iter()
            .filter(|c| !self.dropped_columns.contains(c))
            .map(String::as_str)
            .collect()
    }

    pub fn feature_count(&self) -> usize {
        self.column_names.len() - self.dropped_columns.len()
    }

    /// Canonical column name for a header cell, resolving aliases and
    /// whitespace/case variants. `None` for columns outside the schema.
    pub fn canonical<'a>(&'a self, header: &str) -> Option<&'a str> {
        let norm = normalize_header(header);
        if let Some(c) = self
            .column_names
            .iter()
            .find(|c| normalize_header(c) == norm)
        {
            return Some(c);
        }
        let target = ALIASES.iter().find(|(alias, _)| *alias == norm)?.1;
        self.column_names
            .iter()
            .find(|c| c.as_str() == target)
            .map(String::as_str)
    }
}
