/// Huber loss on a residual norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Huber {
    pub delta: f64,
}

impl Huber {
    pub fn new(delta: f64) -> Self {
        Self { delta }
    }

    /// `r^2 / 2` inside the threshold, linear growth outside.
    pub fn cost(&self, norm: f64) -> f64 {
        if norm <= self.delta {
            0.5 * norm * norm
        } else {
            self.delta * (norm - 0.5 * self.delta)
        }
    }

    /// IRLS weight: `rho'(r) / r`.
    pub fn weight(&self, norm: f64) -> f64 {
        if norm <= self.delta {
            1.0
        } else {
            self.delta / norm
        }
    }
}

/// Either a Huber loss or plain least squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Huber(Huber),
    Squared,
}

impl Loss {
    pub fn huber(delta: f64) -> Self {
        Loss::Huber(Huber::new(delta))
    }

    pub fn cost(&self, norm: f64) -> f64 {
        match self {
            Loss::Huber(h) => h.cost(norm),
            Loss::Squared => 0.5 * norm * norm,
        }
    }

    pub fn weight(&self, norm: f64) -> f64 {
        match self {
            Loss::Huber(h) => h.weight(norm),
            Loss::Squared => 1.0,
        }
    }
}

/// Serde form of an optional loss parameter: a number, or the string `"off"`
/// for plain least squares. Formats without a null (TOML) need the string.
pub mod optional_scale {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Off(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x).serialize(s),
            None => Repr::Off("off".into()).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Off(s) if s == "off" => Ok(None),
            Repr::Off(s) => Err(serde::de::Error::custom(format!("expected a number or \"off\", got {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_is_continuous_at_threshold() {
        let h = Huber::new(1.345);
        let eps = 1e-9;
        assert!((h.cost(1.345 - eps) - h.cost(1.345 + eps)).abs() < 1e-8);
        assert_eq!(h.weight(0.5), 1.0);
        assert!((h.weight(2.69) - 0.5).abs() < 1e-12);
    }
}
