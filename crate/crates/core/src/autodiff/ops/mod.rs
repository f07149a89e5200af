pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod loss;
pub(crate) mod pool;

pub(crate) struct ParamGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}
