pub struct FoldPlan;
pub struct TrainConfig;
