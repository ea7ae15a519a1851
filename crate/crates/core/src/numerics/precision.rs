use serde::{Deserialize, Serialize};

/// Arithmetic width every model computation is carried out at.
///
/// All values are held in `f64`. `Float32` and `Bf16Emulated` round the
/// result of each scalar primitive to the narrower format. For `Float32`
/// this reproduces native single-precision results exactly, since `f64`
/// has more than `2p + 2` significand bits for add, sub, mul, div and sqrt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "f64")]
    Float64,
    #[serde(rename = "f32")]
    Float32,
    #[serde(rename = "bf16")]
    Bf16Emulated,
}

const BF16_MIN_NORMAL: f64 = 1.1754943508222875e-38; // 2^-126
const BF16_SUBNORMAL_STEP: f64 = 9.183549615799121e-41; // 2^-133
const BF16_MAX: f64 = 3.3895313892515355e38; // (2 - 2^-7) * 2^127

/// Rounds to the nearest bfloat16 value (8 exponent bits, 7 stored mantissa
/// bits), ties to even. Rounds directly from `f64`, so there is no double
/// rounding through `f32`.
pub fn round_bf16(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    if x.abs() < BF16_MIN_NORMAL {
        // scaling by a power of two is exact
        return (x / BF16_SUBNORMAL_STEP).round_ties_even() * BF16_SUBNORMAL_STEP;
    }
    // f64 carries 52 fraction bits, bf16 keeps 7: drop the low 45.
    const DROP: u32 = 45;
    let bits = x.to_bits();
    let lsb = (bits >> DROP) & 1;
    let bias = (1u64 << (DROP - 1)) - 1 + lsb;
    let rounded = f64::from_bits((bits + bias) & !((1u64 << DROP) - 1));
    if rounded.abs() > BF16_MAX {
        f64::INFINITY.copysign(x)
    } else {
        rounded
    }
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Float64 => x,
            Precision::Float32 => x as f32 as f64,
            Precision::Bf16Emulated => round_bf16(x),
        }
    }

    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    #[inline]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    #[inline]
    pub fn sqrt(self, a: f64) -> f64 {
        self.round(a.sqrt())
    }

    #[inline]
    pub fn exp(self, a: f64) -> f64 {
        self.round(a.exp())
    }

    /// Left-to-right accumulation, rounding after every multiply and add.
    pub fn dot(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .fold(0.0, |acc, (&x, &y)| self.add(acc, self.mul(x, y)))
    }

    pub fn sum(self, a: &[f64]) -> f64 {
        a.iter().fold(0.0, |acc, &x| self.add(acc, x))
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Float64 => "f64",
            Precision::Float32 => "f32",
            Precision::Bf16Emulated => "bf16",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f64" | "float64" => Ok(Precision::Float64),
            "f32" | "float32" => Ok(Precision::Float32),
            "bf16" | "bfloat16" => Ok(Precision::Bf16Emulated),
            other => Err(format!("unknown precision '{other}' (expected f64, f32 or bf16)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
