use serde::{Deserialize, Serialize};

use super::{SpeedPanel, WINDOW};
use crate::{Error, Result};

/// Chronological train / validation / test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fs = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fs.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::invalid("split fractions must be positive"));
        }
        if (fs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// Segment lengths for a series of `total` steps: floors of each fraction,
    /// remainder appended to the test segment.
    pub fn lengths(&self, total: usize) -> (usize, usize, usize) {
        let train = (self.train_fraction * total as f64).floor() as usize;
        let val = (self.val_fraction * total as f64).floor() as usize;
        (train, val, total - train - val)
    }
}

pub fn chronological_split(
    panel: &SpeedPanel,
    spec: &SplitSpec,
) -> Result<(SpeedPanel, SpeedPanel, SpeedPanel)> {
    spec.validate()?;
    let (train, val, test) = spec.lengths(panel.len());
    for (segment, len) in [("train", train), ("validation", val), ("test", test)] {
        if len < WINDOW {
            return Err(Error::SplitTooShort {
                segment,
                len,
                min: WINDOW,
            });
        }
    }
    Ok((
        panel.slice(0..train),
        panel.slice(train..train + val),
        panel.slice(train + val..panel.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpeedUnit;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn panel(len: usize) -> SpeedPanel {
        SpeedPanel::from_complete(
            Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            SpeedUnit::Kmh,
            vec!["a".into()],
            vec![(0..len).map(|i| i as f64).collect()],
        )
        .unwrap()
    }

    #[test]
    fn remainder_goes_to_test() {
        let s = SplitSpec::default();
        assert_eq!(s.lengths(1000), (700, 100, 200));
        assert_eq!(s.lengths(1001), (700, 100, 201));
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(matches!(
            chronological_split(&panel(20), &SplitSpec::default()),
            Err(Error::SplitTooShort { .. })
        ));
    }

    #[test]
    fn invalid_fractions_are_rejected() {
        let s = SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.0,
            test_fraction: 0.2,
        };
        assert!(chronological_split(&panel(1000), &s).is_err());
    }

    proptest! {
        #[test]
        fn segments_partition_time_axis(len in 200usize..3000) {
            let p = panel(len);
            let (a, b, c) = chronological_split(&p, &SplitSpec::default()).unwrap();
            prop_assert_eq!(a.len() + b.len() + c.len(), len);
            let joined: Vec<f64> = [a.series(0), b.series(0), c.series(0)].concat();
            prop_assert_eq!(joined.as_slice(), p.series(0));
            prop_assert_eq!(b.start(), p.timestamp(a.len()));
            prop_assert_eq!(c.start(), p.timestamp(a.len() + b.len()));
        }
    }
}
