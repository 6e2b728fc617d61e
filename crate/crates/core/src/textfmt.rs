//! Shared numeric text formatting for exported tables.

/// 17 significant decimal digits: enough to round-trip any `f64`.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
