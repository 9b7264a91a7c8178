//! Energy accounting by component, in picojoules.

use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    /// DRAM array reads for NMP operators.
    pub dram: f64,
    pub mac: f64,
    pub sram: f64,
    pub link: f64,
    pub sfe: f64,
    /// xPU <-> DRAM interface transfers.
    pub interface: f64,
    pub xpu: f64,
    /// In-bank row swaps between batches.
    pub swap: f64,
    /// Static logic-die power integrated over time.
    pub misc: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.dram
            + self.mac
            + self.sram
            + self.link
            + self.sfe
            + self.interface
            + self.xpu
            + self.swap
            + self.misc
    }

    pub fn dram(pj: f64) -> Self {
        Self {
            dram: pj,
            ..Self::default()
        }
    }
}

impl Add for Energy {
    type Output = Energy;

    fn add(self, o: Energy) -> Energy {
        Energy {
            dram: self.dram + o.dram,
            mac: self.mac + o.mac,
            sram: self.sram + o.sram,
            link: self.link + o.link,
            sfe: self.sfe + o.sfe,
            interface: self.interface + o.interface,
            xpu: self.xpu + o.xpu,
            swap: self.swap + o.swap,
            misc: self.misc + o.misc,
        }
    }
}

impl AddAssign for Energy {
    fn add_assign(&mut self, o: Energy) {
        *self = *self + o;
    }
}

impl Mul<f64> for Energy {
    type Output = Energy;

    fn mul(self, s: f64) -> Energy {
        Energy {
            dram: self.dram * s,
            mac: self.mac * s,
            sram: self.sram * s,
            link: self.link * s,
            sfe: self.sfe * s,
            interface: self.interface * s,
            xpu: self.xpu * s,
            swap: self.swap * s,
            misc: self.misc * s,
        }
    }
}

impl std::iter::Sum for Energy {
    fn sum<I: Iterator<Item = Energy>>(iter: I) -> Energy {
        iter.fold(Energy::default(), Add::add)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_sums_components() {
        let e = Energy {
            dram: 1.0,
            mac: 2.0,
            sram: 3.0,
            link: 4.0,
            sfe: 5.0,
            interface: 6.0,
            xpu: 7.0,
            swap: 8.0,
            misc: 9.0,
        };
        assert_eq!(e.total(), 45.0);
        assert_eq!((e + e).total(), 90.0);
        assert_eq!((e * 0.5).total(), 22.5);
    }
}
