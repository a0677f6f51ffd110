use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AlignError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    /// Skip alignment training entirely: both proxies stay at the base model.
    NoIterative,
    /// Generate with the FAP alone, no target model.
    NoGuidance,
    /// Use the base model's logits in place of the HDP's when steering.
    NoNegative,
}

impl FromStr for AblationFlag {
    type Err = AlignError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().replace('-', "_").as_str() {
            "no_iterative" => Ok(Self::NoIterative),
            "no_guidance" => Ok(Self::NoGuidance),
            "no_negative" => Ok(Self::NoNegative),
            other => Err(AlignError::ConflictingFlags(format!(
                "unknown ablation `{other}`"
            ))),
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoIterative => "no_iterative",
            Self::NoGuidance => "no_guidance",
            Self::NoNegative => "no_negative",
        })
    }
}

/// A model that can fill a proxy slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyRole {
    /// The proxy base model without any adapter.
    Base,
    Fap,
    Hdp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Target logits plus the projected `positive - negative` difference.
    Steered {
        positive: ProxyRole,
        negative: ProxyRole,
    },
    /// One proxy decodes on its own.
    ProxyOnly { model: ProxyRole },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub variant: String,
    pub train_hdp: bool,
    pub train_fap: bool,
    pub generator: Generator,
}

/// Maps ablation flags to training and decoding wiring. At most one
/// distinct flag may be set.
pub fn ablation_config(flags: &[AblationFlag]) -> Result<Wiring, AlignError> {
    let mut distinct: Vec<AblationFlag> = Vec::new();
    for f in flags {
        if !distinct.contains(f) {
            distinct.push(*f);
        }
    }
    if distinct.len() > 1 {
        let names: Vec<String> = distinct.iter().map(ToString::to_string).collect();
        return Err(AlignError::ConflictingFlags(names.join(" + ")));
    }
    Ok(match distinct.first() {
        None => Wiring {
            variant: "full".into(),
            train_hdp: true,
            train_fap: true,
            generator: Generator::Steered {
                positive: ProxyRole::Fap,
                negative: ProxyRole::Hdp,
            },
        },
        Some(AblationFlag::NoIterative) => Wiring {
            variant: "no_iterative".into(),
            train_hdp: false,
            train_fap: false,
            generator: Generator::Steered {
                positive: ProxyRole::Base,
                negative: ProxyRole::Base,
            },
        },
        Some(AblationFlag::NoGuidance) => Wiring {
            variant: "no_guidance".into(),
            train_hdp: true,
            train_fap: true,
            generator: Generator::ProxyOnly {
                model: ProxyRole::Fap,
            },
        },
        Some(AblationFlag::NoNegative) => Wiring {
            variant: "no_negative".into(),
            train_hdp: true,
            train_fap: true,
            generator: Generator::Steered {
                positive: ProxyRole::Fap,
                negative: ProxyRole::Base,
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wiring() {
        assert_eq!(ablation_config(&[]).unwrap().variant, "full");
        let w = ablation_config(&[AblationFlag::NoIterative]).unwrap();
        assert_eq!(
            w.generator,
            Generator::Steered {
                positive: ProxyRole::Base,
                negative: ProxyRole::Base
            }
        );
        assert!(!w.train_fap && !w.train_hdp);
        let w = ablation_config(&[AblationFlag::NoNegative, AblationFlag::NoNegative]).unwrap();
        assert_eq!(
            w.generator,
            Generator::Steered {
                positive: ProxyRole::Fap,
                negative: ProxyRole::Base
            }
        );
        assert_eq!(
            ablation_config(&[AblationFlag::NoGuidance])
                .unwrap()
                .generator,
            Generator::ProxyOnly {
                model: ProxyRole::Fap
            }
        );
        assert!(matches!(
            ablation_config(&[AblationFlag::NoGuidance, AblationFlag::NoNegative]),
            Err(AlignError::ConflictingFlags(_))
        ));
        assert_eq!(
            "no-negative".parse::<AblationFlag>().unwrap(),
            AblationFlag::NoNegative
        );
        assert!("bogus".parse::<AblationFlag>().is_err());
    }
}
