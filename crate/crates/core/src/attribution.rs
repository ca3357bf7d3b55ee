pub struct AttributionRecord;
pub struct AttributionTable;
pub struct Baseline;
