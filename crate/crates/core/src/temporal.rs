//! RW2 structures on possibly irregular axes, the APC layout with its
//! identifiable slope/curvature split, and the calendar prediction grid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::{AgeBandSchema, CountCell, Month};
use crate::error::{Error, Result};
use crate::linalg::SymSparse;
use crate::spatial::StructuredPrecision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisKind {
    Age,
    Period,
    Cohort,
}

impl fmt::Display for AxisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisKind::Age => "age",
            AxisKind::Period => "period",
            AxisKind::Cohort => "cohort",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAxis {
    pub kind: AxisKind,
    pub values: Vec<f64>,
}

impl TemporalAxis {
    pub fn new(kind: AxisKind, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAxis(format!(
                "{kind} axis has non-finite values"
            )));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidAxis(format!(
                "{kind} axis values must be strictly increasing"
            )));
        }
        Ok(Self { kind, values })
    }

    /// Consecutive calendar years `first..=last`.
    pub fn years(kind: AxisKind, first: i32, last: i32) -> Result<Self> {
        Self::new(kind, (first..=last).map(f64::from).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values centred on their mean and divided by their range.
    pub fn slope_values(&self) -> Vec<f64> {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let range = self.values[self.values.len() - 1] - self.values[0];
        let range = if range > 0.0 { range } else { 1.0 };
        self.values.iter().map(|v| (v - mean) / range).collect()
    }
}

/// Second-order random-walk structure `D' W D` where `D` holds second divided
/// differences and `W` the half-sums of adjacent gaps. Gaps are measured in
/// units of the mean gap, so equally spaced axes give the textbook matrix.
pub fn rw2_precision(axis: &TemporalAxis) -> Result<StructuredPrecision> {
    let n = axis.len();
    if n < 3 {
        return Err(Error::InvalidAxis(format!(
            "{} axis needs at least 3 values for RW2, got {n}",
            axis.kind
        )));
    }
    if axis.values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidAxis(format!(
            "{} axis has duplicate or unsorted values",
            axis.kind
        )));
    }
    let mean_gap = (axis.values[n - 1] - axis.values[0]) / (n - 1) as f64;
    let x: Vec<f64> = axis.values.iter().map(|v| v / mean_gap).collect();
    let mut trip = Vec::with_capacity(6 * n);
    for i in 1..n - 1 {
        let h1 = x[i] - x[i - 1];
        let h2 = x[i + 1] - x[i];
        let w = 2.0 / (h1 + h2);
        let d = [1.0 / h1, -(1.0 / h1 + 1.0 / h2), 1.0 / h2];
        for a in 0..3 {
            for b in a..3 {
                trip.push((i - 1 + a, i - 1 + b, w * d[a] * d[b]));
            }
        }
    }
    Ok(StructuredPrecision {
        matrix: SymSparse::from_triplets(n, trip),
        rank_deficiency: 2,
        constraints: curvature_constraints(axis),
        e: vec![0.0; 2],
    })
}

/// Sum-to-zero and zero inner product with the centred axis values.
pub fn curvature_constraints(axis: &TemporalAxis) -> Vec<Vec<f64>> {
    let n = axis.len() as f64;
    let mean = axis.values.iter().sum::<f64>() / n;
    vec![
        vec![1.0; axis.len()],
        axis.values.iter().map(|v| v - mean).collect(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApcVariant {
    Ap,
    Ac,
    Apc,
}

impl FromStr for ApcVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AP" => Ok(ApcVariant::Ap),
            "AC" => Ok(ApcVariant::Ac),
            "APC" => Ok(ApcVariant::Apc),
            _ => Err(Error::InvalidParameter(format!(
                "unknown model variant {s:?} (expected AP, AC or APC)"
            ))),
        }
    }
}

impl fmt::Display for ApcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApcVariant::Ap => "AP",
            ApcVariant::Ac => "AC",
            ApcVariant::Apc => "APC",
        })
    }
}

/// Which temporal linear trends enter as fixed slopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlopePair {
    AgePeriod,
    AgeCohort,
}

impl FromStr for SlopePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "age-period" => Ok(SlopePair::AgePeriod),
            "age-cohort" => Ok(SlopePair::AgeCohort),
            _ => Err(Error::InvalidParameter(format!(
                "unknown slope pair {s:?} (expected age-period or age-cohort)"
            ))),
        }
    }
}

impl ApcVariant {
    pub fn default_slopes(self) -> SlopePair {
        match self {
            ApcVariant::Ac => SlopePair::AgeCohort,
            _ => SlopePair::AgePeriod,
        }
    }

    pub fn curvatures(self) -> &'static [AxisKind] {
        match self {
            ApcVariant::Ap => &[AxisKind::Age, AxisKind::Period],
            ApcVariant::Ac => &[AxisKind::Age, AxisKind::Cohort],
            ApcVariant::Apc => &[AxisKind::Age, AxisKind::Period, AxisKind::Cohort],
        }
    }
}

/// Axis indices and slope covariates for one (band, period, cohort).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCoords {
    pub age: usize,
    pub period: usize,
    pub cohort: usize,
    pub t1: f64,
    pub t2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApcLayout {
    pub variant: ApcVariant,
    pub slopes: SlopePair,
    pub age: TemporalAxis,
    pub period: TemporalAxis,
    pub cohort: TemporalAxis,
    first_period: i32,
    first_cohort: i32,
    age_slope: Vec<f64>,
    second_slope: Vec<f64>,
}

/// Options for the temporal layout. `age_values` overrides the band
/// midpoints; `horizon` extends the period and cohort axes past the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayoutOptions {
    pub slopes: Option<SlopePair>,
    pub age_values: Option<Vec<f64>>,
    pub horizon: u32,
}

pub fn build_apc_layout(
    cells: &[CountCell],
    variant: ApcVariant,
    schema: &AgeBandSchema,
    options: &LayoutOptions,
) -> Result<ApcLayout> {
    if cells.is_empty() {
        return Err(Error::InvalidAxis("no cells to lay out".into()));
    }
    let min_p = cells.iter().map(|c| c.period).min().unwrap();
    let max_p = cells.iter().map(|c| c.period).max().unwrap();
    let min_c = cells.iter().map(|c| c.cohort).min().unwrap();
    let max_c = cells.iter().map(|c| c.cohort).max().unwrap();
    ApcLayout::new(variant, schema, options, (min_p, max_p), (min_c, max_c))
}

impl ApcLayout {
    pub fn new(
        variant: ApcVariant,
        schema: &AgeBandSchema,
        options: &LayoutOptions,
        periods: (i32, i32),
        cohorts: (i32, i32),
    ) -> Result<Self> {
        let slopes = options.slopes.unwrap_or(variant.default_slopes());
        let ages = match &options.age_values {
            Some(v) if v.len() != AgeBandSchema::BANDS => {
                return Err(Error::InvalidAxis(format!(
                    "age axis needs {} values, got {}",
                    AgeBandSchema::BANDS,
                    v.len()
                )))
            }
            Some(v) => v.clone(),
            None => schema.midpoints().to_vec(),
        };
        let h = options.horizon as i32;
        let last_p = periods.1 + h;
        let last_c = cohorts.1.max(last_p);
        // Children aged 59 months early in the first period were born five years before it.
        let first_c = cohorts.0.min(periods.0 - 5);
        let age = TemporalAxis::new(AxisKind::Age, ages)?;
        let period = TemporalAxis::years(AxisKind::Period, periods.0, last_p)?;
        let cohort = TemporalAxis::years(AxisKind::Cohort, first_c, last_c)?;
        for axis in [&age, &period, &cohort] {
            let needed = variant.curvatures().contains(&axis.kind) || axis.kind == AxisKind::Period;
            if needed && axis.len() < 3 {
                return Err(Error::InvalidAxis(format!(
                    "{} axis has {} levels, need at least 3",
                    axis.kind,
                    axis.len()
                )));
            }
        }
        let age_slope = age.slope_values();
        let second_slope = match slopes {
            SlopePair::AgePeriod => period.slope_values(),
            SlopePair::AgeCohort => cohort.slope_values(),
        };
        Ok(Self {
            variant,
            slopes,
            first_period: periods.0,
            first_cohort: first_c,
            age,
            period,
            cohort,
            age_slope,
            second_slope,
        })
    }

    pub fn periods(&self) -> std::ops::RangeInclusive<i32> {
        self.first_period..=self.first_period + self.period.len() as i32 - 1
    }

    pub fn cohorts(&self) -> std::ops::RangeInclusive<i32> {
        self.first_cohort..=self.first_cohort + self.cohort.len() as i32 - 1
    }

    pub fn axis(&self, kind: AxisKind) -> &TemporalAxis {
        match kind {
            AxisKind::Age => &self.age,
            AxisKind::Period => &self.period,
            AxisKind::Cohort => &self.cohort,
        }
    }

    pub fn has_curvature(&self, kind: AxisKind) -> bool {
        self.variant.curvatures().contains(&kind)
    }

    pub fn coords(&self, band: usize, period: i32, cohort: i32) -> Result<CellCoords> {
        if band >= self.age.len() {
            return Err(Error::InvalidAxis(format!("age band {band} out of range")));
        }
        if !self.periods().contains(&period) {
            return Err(Error::InvalidAxis(format!(
                "period {period} outside {:?}",
                self.periods()
            )));
        }
        if !self.cohorts().contains(&cohort) {
            return Err(Error::InvalidAxis(format!(
                "cohort {cohort} outside {:?}",
                self.cohorts()
            )));
        }
        let p = (period - self.first_period) as usize;
        let c = (cohort - self.first_cohort) as usize;
        let t2 = match self.slopes {
            SlopePair::AgePeriod => self.second_slope[p],
            SlopePair::AgeCohort => self.second_slope[c],
        };
        Ok(CellCoords {
            age: band,
            period: p,
            cohort: c,
            t1: self.age_slope[band],
            t2,
        })
    }
}

/// Months at risk that a calendar year contributes to one
/// (band, period, cohort), from enumerating each month and each age 0..59.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionCell {
    pub age_band: usize,
    pub period: i32,
    pub cohort: i32,
    pub months: u32,
}

pub fn period_cells(period: i32, schema: &AgeBandSchema) -> Vec<PredictionCell> {
    let mut acc: BTreeMap<(usize, i32), u32> = BTreeMap::new();
    for m in 1..=12 {
        let month = Month::new(period, m);
        for age in 0..AgeBandSchema::MAX_AGE {
            let band = schema.band_of(age).expect("age below 60");
            let cohort = month.plus(-(age as i32)).year();
            *acc.entry((band, cohort)).or_default() += 1;
        }
    }
    acc.into_iter()
        .map(|((age_band, cohort), months)| PredictionCell {
            age_band,
            period,
            cohort,
            months,
        })
        .collect()
}

/// Cells for the `horizon` years after `last_period`.
pub fn prediction_grid(
    last_period: i32,
    horizon: u32,
    schema: &AgeBandSchema,
) -> Vec<PredictionCell> {
    (1..=horizon as i32)
        .flat_map(|k| period_cells(last_period + k, schema))
        .collect()
}

/// The cohort contributing the most months to a band in a period; ties go to
/// the more recent cohort.
pub fn dominant_cohort(band: usize, period: i32, schema: &AgeBandSchema) -> i32 {
    period_cells(period, schema)
        .into_iter()
        .filter(|c| c.age_band == band)
        .max_by_key(|c| (c.months, c.cohort))
        .map(|c| c.cohort)
        .expect("every band has a cohort")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, RANK_TOLERANCE};
    use nalgebra::DMatrix;

    #[test]
    fn equal_spacing_rw2() {
        let axis = TemporalAxis::years(AxisKind::Period, 1, 4).unwrap();
        let q = rw2_precision(&axis).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, -2.0, 1.0, 0.0, -2.0, 5.0, -4.0, 1.0, 1.0, -4.0, 5.0, -2.0, 0.0, 1.0, -2.0,
                1.0,
            ],
        );
        assert!((q.matrix.to_dense() - expect).abs().max() < 1e-12);
        q.check_rank().unwrap();
    }

    #[test]
    fn irregular_age_axis_nullspace() {
        let axis = TemporalAxis::new(AxisKind::Age, AgeBandSchema::default().midpoints().to_vec())
            .unwrap();
        let q = rw2_precision(&axis).unwrap();
        assert_eq!(q.numerical_deficiency(), 2);
        let ones = vec![1.0; 6];
        let lin = axis.values.clone();
        let scale = q.matrix.to_dense().abs().max();
        for v in [ones, lin] {
            assert!(q
                .matrix
                .mul_vec(&v)
                .iter()
                .all(|x| x.abs() < 1e-12 * scale.max(1.0) * 60.0));
        }
    }

    #[test]
    fn duplicate_values_rejected() {
        assert!(TemporalAxis::new(AxisKind::Age, vec![0.0, 1.0, 1.0]).is_err());
        assert!(
            rw2_precision(&TemporalAxis::years(AxisKind::Period, 2000, 2001).unwrap()).is_err()
        );
    }

    #[test]
    fn three_point_constraints() {
        let axis = TemporalAxis::years(AxisKind::Period, 1, 3).unwrap();
        assert_eq!(
            curvature_constraints(&axis),
            vec![vec![1.0, 1.0, 1.0], vec![-1.0, 0.0, 1.0]]
        );
    }

    #[test]
    fn projecting_linear_vector_leaves_nothing() {
        let axis = TemporalAxis::new(AxisKind::Age, AgeBandSchema::default().midpoints().to_vec())
            .unwrap();
        let a = curvature_constraints(&axis);
        let am = DMatrix::from_fn(2, 6, |i, j| a[i][j]);
        let x = DMatrix::from_fn(6, 1, |i, _| 3.0 - 0.25 * axis.values[i]);
        let proj = &x - am.transpose() * (&am * am.transpose()).try_inverse().unwrap() * (&am * &x);
        assert!(proj.abs().max() < 1e-10);
    }

    fn kenya_cells() -> Vec<CountCell> {
        let schema = AgeBandSchema::default();
        let mut out = Vec::new();
        for p in 2006..=2013 {
            for c in period_cells(p, &schema) {
                out.push(CountCell {
                    age_band: c.age_band,
                    period: p,
                    cohort: c.cohort,
                    cluster_id: "k".into(),
                    region_id: "r".into(),
                    is_urban: false,
                    deaths: 0,
                    exposure: c.months as u64,
                });
            }
        }
        out
    }

    #[test]
    fn layout_axes_span_data() {
        let layout = build_apc_layout(
            &kenya_cells(),
            ApcVariant::Apc,
            &AgeBandSchema::default(),
            &LayoutOptions::default(),
        )
        .unwrap();
        assert_eq!(layout.cohorts(), 2001..=2013);
        assert_eq!(layout.periods(), 2006..=2013);
        assert_eq!(layout.slopes, SlopePair::AgePeriod);
        let ap = build_apc_layout(
            &kenya_cells(),
            ApcVariant::Ap,
            &AgeBandSchema::default(),
            &LayoutOptions::default(),
        )
        .unwrap();
        assert_eq!(ap.variant.curvatures().len(), 2);
        let ac = build_apc_layout(
            &kenya_cells(),
            ApcVariant::Ac,
            &AgeBandSchema::default(),
            &LayoutOptions::default(),
        )
        .unwrap();
        assert_eq!(ac.slopes, SlopePair::AgeCohort);
        assert!(!ac.has_curvature(AxisKind::Period));
    }

    #[test]
    fn slopes_are_centred_unit_range() {
        let axis = TemporalAxis::years(AxisKind::Period, 2006, 2013).unwrap();
        let s = axis.slope_values();
        assert!(s.iter().sum::<f64>().abs() < 1e-12);
        assert!((s[7] - s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apc_design_full_rank_with_constraints() {
        let cells = kenya_cells();
        let layout = build_apc_layout(
            &cells,
            ApcVariant::Apc,
            &AgeBandSchema::default(),
            &LayoutOptions::default(),
        )
        .unwrap();
        let (na, np, nc) = (layout.age.len(), layout.period.len(), layout.cohort.len());
        let ncol = 3 + na + np + nc;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for c in &cells {
            let k = layout.coords(c.age_band, c.period, c.cohort).unwrap();
            let mut r = vec![0.0; ncol];
            r[0] = 1.0;
            r[1] = k.t1;
            r[2] = k.t2;
            r[3 + k.age] = 1.0;
            r[3 + na + k.period] = 1.0;
            r[3 + na + np + k.cohort] = 1.0;
            rows.push(r);
        }
        let mut offset = 3;
        for axis in [&layout.age, &layout.period, &layout.cohort] {
            for con in curvature_constraints(axis) {
                let mut r = vec![0.0; ncol];
                r[offset..offset + axis.len()].copy_from_slice(&con);
                rows.push(r);
            }
            offset += axis.len();
        }
        let m = DMatrix::from_fn(rows.len(), ncol, |i, j| rows[i][j]);
        let gram = m.transpose() * m;
        assert_eq!(numerical_rank(&gram, RANK_TOLERANCE * 1e-4), ncol);
    }

    #[test]
    fn prediction_grid_years_and_cohorts() {
        let schema = AgeBandSchema::default();
        let grid = prediction_grid(2013, 5, &schema);
        let periods: std::collections::BTreeSet<i32> = grid.iter().map(|c| c.period).collect();
        assert_eq!(
            periods.into_iter().collect::<Vec<_>>(),
            vec![2014, 2015, 2016, 2017, 2018]
        );
        assert!(grid
            .iter()
            .any(|c| c.age_band == 5 && c.period == 2014 && c.cohort == 2009));
        assert!(grid
            .iter()
            .filter(|c| c.period == 2014)
            .all(|c| c.cohort >= 2009));
        for p in 2014..=2018 {
            let total: u32 = grid
                .iter()
                .filter(|c| c.period == p)
                .map(|c| c.months)
                .sum();
            assert_eq!(total, 12 * 60);
        }
        assert!(prediction_grid(2013, 0, &schema).is_empty());
    }

    #[test]
    fn dominant_cohorts() {
        let s = AgeBandSchema::default();
        assert_eq!(dominant_cohort(0, 2010, &s), 2010);
        // [1,12): 66 months from each of the two cohorts, the later wins.
        assert_eq!(dominant_cohort(1, 2010, &s), 2010);
        assert_eq!(dominant_cohort(2, 2010, &s), 2009);
        assert_eq!(dominant_cohort(5, 2010, &s), 2006);
    }
}
