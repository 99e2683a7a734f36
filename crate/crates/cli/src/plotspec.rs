//! Declarative plot description: data, marks and encodings only, so any
//! plotting tool can render it.
//!
//! Each constraint set gets a panel with the treated and synthetic outcome
//! lines, one interval bar per post period for the counterfactual and, in
//! joint mode, a shaded band of the simultaneous intervals. A sensitivity
//! run adds a panel with one interval bar per scale.

use serde::Serialize;

use crate::ResultsBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Line,
    /// Vertical bar from `y` to `y2`.
    Errorbar,
    /// Band between `y` and `y2`.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Channel {
    pub field: &'static str,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Encoding {
    pub x: Channel,
    pub y: Channel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y2: Option<Channel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Datum {
    pub x: f64,
    pub y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y2: Option<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Layer {
    pub name: String,
    pub mark: Mark,
    pub encoding: Encoding,
    pub data: Vec<Datum>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Panel {
    pub title: String,
    /// First post-treatment period, for a vertical reference line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment_start: Option<f64>,
    /// Horizontal reference, e.g. the observed treated outcome.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_y: Option<f64>,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSpec {
    pub version: u32,
    pub panels: Vec<Panel>,
}

fn channel(field: &'static str, title: &str) -> Channel {
    Channel {
        field,
        title: title.to_string(),
    }
}

pub fn build(bundle: &ResultsBundle) -> PlotSpec {
    let d = &bundle.data;
    let line_enc = || Encoding {
        x: channel("x", &d.time_var),
        y: channel("y", &d.outcome),
        y2: None,
    };
    let bar_enc = || Encoding {
        x: channel("x", &d.time_var),
        y: channel("y", "lower"),
        y2: Some(channel("y2", "upper")),
    };
    let treated: Vec<Datum> = d
        .pre_periods
        .iter()
        .zip(d.y_pre.iter().map(|y| Some(*y)))
        .chain(d.post_periods.iter().zip(d.y_post.iter().copied()))
        .map(|(t, y)| Datum { x: *t as f64, y, y2: None })
        .collect();

    let mut panels = Vec::new();
    for r in &bundle.results {
        let synthetic: Vec<Datum> = d
            .pre_periods
            .iter()
            .zip(r.fit.synthetic_pre.iter().map(|y| Some(*y)))
            .chain(r.intervals.iter().map(|iv| (&iv.period, iv.y0_hat)))
            .map(|(t, y)| Datum { x: *t as f64, y, y2: None })
            .collect();
        let bars = |rows: &[scpi_core::uncertainty::PeriodInterval]| -> Vec<Datum> {
            rows.iter()
                .map(|iv| Datum {
                    x: iv.period as f64,
                    y: iv.y0_lower,
                    y2: Some(iv.y0_upper),
                })
                .collect()
        };
        let mut layers = vec![
            Layer {
                name: "treated".into(),
                mark: Mark::Line,
                encoding: line_enc(),
                data: treated.clone(),
            },
            Layer {
                name: "synthetic".into(),
                mark: Mark::Line,
                encoding: line_enc(),
                data: synthetic,
            },
            Layer {
                name: "prediction_interval".into(),
                mark: Mark::Errorbar,
                encoding: bar_enc(),
                data: bars(&r.intervals),
            },
        ];
        if let Some(joint) = &r.joint {
            layers.push(Layer {
                name: "joint_band".into(),
                mark: Mark::Area,
                encoding: bar_enc(),
                data: bars(joint),
            });
        }
        panels.push(Panel {
            title: r.label.clone(),
            treatment_start: d.post_periods.first().map(|t| *t as f64),
            reference_y: None,
            layers,
        });

        if let Some(sens) = &r.sensitivity {
            panels.push(Panel {
                title: format!("{}: sensitivity at {}", r.label, sens.period),
                treatment_start: None,
                reference_y: sens.y1,
                layers: vec![Layer {
                    name: "sensitivity".into(),
                    mark: Mark::Errorbar,
                    encoding: Encoding {
                        x: channel("x", "scale"),
                        y: channel("y", "lower"),
                        y2: Some(channel("y2", "upper")),
                    },
                    data: sens
                        .rows
                        .iter()
                        .map(|row| Datum {
                            x: row.scale,
                            y: Some(row.y0_lower),
                            y2: Some(Some(row.y0_upper)),
                        })
                        .collect(),
                }],
            });
        }
    }
    PlotSpec { version: 1, panels }
}
