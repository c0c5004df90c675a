//! Auxiliary sensor channels modelled as piecewise-linear lookup tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voltage span every table output must stay inside.
pub const OUTPUT_RANGE_V: (f64, f64) = (0.0, 5.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("table needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("table inputs must be strictly increasing (point {0})")]
    NonMonotoneInputs(usize),
    #[error("output {volts} V at point {index} outside {}..{} V", OUTPUT_RANGE_V.0, OUTPUT_RANGE_V.1)]
    OutputOutOfRange { index: usize, volts: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("no table loaded for {0}")]
    NoTable(SensorId),
    #[error("unknown sensor '{0}'")]
    UnknownSensor(String),
    #[error("sensor table file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorId {
    ThrottlePosition,
    OilPressure,
    BoostPressure,
    RailPressure,
    CoolantTemperature,
    BoostTemperature,
}

impl SensorId {
    pub const ALL: [SensorId; 6] = [
        SensorId::ThrottlePosition,
        SensorId::OilPressure,
        SensorId::BoostPressure,
        SensorId::RailPressure,
        SensorId::CoolantTemperature,
        SensorId::BoostTemperature,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SensorId::ThrottlePosition => "throttle_position",
            SensorId::OilPressure => "oil_pressure",
            SensorId::BoostPressure => "boost_pressure",
            SensorId::RailPressure => "rail_pressure",
            SensorId::CoolantTemperature => "coolant_temperature",
            SensorId::BoostTemperature => "boost_temperature",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            SensorId::ThrottlePosition => "%",
            SensorId::OilPressure | SensorId::BoostPressure | SensorId::RailPressure => "bar",
            SensorId::CoolantTemperature | SensorId::BoostTemperature => "degC",
        }
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorId {
    type Err = SensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let short = match s {
            "throttle" => Some(SensorId::ThrottlePosition),
            "oil_p" | "oil" => Some(SensorId::OilPressure),
            "boost_p" | "boost" => Some(SensorId::BoostPressure),
            "rail_p" | "rail" => Some(SensorId::RailPressure),
            "coolant_t" | "coolant" => Some(SensorId::CoolantTemperature),
            "boost_t" => Some(SensorId::BoostTemperature),
            _ => None,
        };
        short
            .or_else(|| SensorId::ALL.into_iter().find(|id| id.name() == s))
            .ok_or_else(|| SensorError::UnknownSensor(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorTable {
    pub sensor: SensorId,
    points: Vec<(f64, f64)>,
}

impl SensorTable {
    pub fn new(sensor: SensorId, points: Vec<(f64, f64)>) -> Result<Self, SensorError> {
        if points.len() < 2 {
            return Err(SensorError::TooFewPoints(points.len()));
        }
        for (i, &(x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(SensorError::NonFinite(format!("point {i}")));
            }
            if !(OUTPUT_RANGE_V.0..=OUTPUT_RANGE_V.1).contains(&y) {
                return Err(SensorError::OutputOutOfRange { index: i, volts: y });
            }
            if i > 0 && x <= points[i - 1].0 {
                return Err(SensorError::NonMonotoneInputs(i));
            }
        }
        Ok(Self { sensor, points })
    }

    /// Parses the `input,output_volts` CSV table format.
    pub fn from_csv(sensor: SensorId, text: &str) -> Result<Self, SensorError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        match lines.next() {
            Some(h) if h.replace(' ', "") == "input,output_volts" => {}
            other => {
                return Err(SensorError::File(format!(
                    "expected header 'input,output_volts', found {other:?}"
                )))
            }
        }
        let mut points = Vec::new();
        for (row, line) in lines.enumerate() {
            let mut cols = line.split(',').map(str::trim);
            let parse = |c: Option<&str>| -> Result<f64, SensorError> {
                c.ok_or_else(|| SensorError::File(format!("row {}: missing column", row + 1)))?
                    .parse()
                    .map_err(|e| SensorError::File(format!("row {}: {e}", row + 1)))
            };
            let x = parse(cols.next())?;
            let y = parse(cols.next())?;
            if cols.next().is_some() {
                return Err(SensorError::File(format!("row {}: too many columns", row + 1)));
            }
            points.push((x, y));
        }
        Self::new(sensor, points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn units(&self) -> &'static str {
        self.sensor.units()
    }

    /// Piecewise-linear lookup, clamped to the end values outside the span.
    pub fn read(&self, input: f64) -> f64 {
        let pts = &self.points;
        let (x_first, y_first) = pts[0];
        let (x_last, y_last) = pts[pts.len() - 1];
        if input <= x_first {
            return y_first;
        }
        if input >= x_last {
            return y_last;
        }
        // first knot with x >= input
        let hi = pts.partition_point(|&(x, _)| x < input);
        let (x1, y1) = pts[hi];
        if x1 == input {
            return y1;
        }
        let (x0, y0) = pts[hi - 1];
        let t = (input - x0) / (x1 - x0);
        let y = y0 + (y1 - y0) * t;
        // keep rounding from stepping past the segment's end values
        y.clamp(y0.min(y1), y0.max(y1))
    }

    /// Default placeholder table for each sensor (documented, file-replaceable).
    pub fn default_for(sensor: SensorId) -> Self {
        let points = match sensor {
            SensorId::ThrottlePosition => vec![(0.0, 0.5), (100.0, 4.5)],
            SensorId::OilPressure => vec![(0.0, 0.5), (10.0, 4.5)],
            SensorId::BoostPressure => vec![(0.0, 0.5), (3.0, 4.5)],
            SensorId::RailPressure => vec![(0.0, 0.5), (1600.0, 4.5)],
            // NTC-like: voltage falls steeply when cold, flattens when hot
            SensorId::CoolantTemperature => vec![
                (-40.0, 4.8),
                (0.0, 4.1),
                (20.0, 3.4),
                (40.0, 2.5),
                (60.0, 1.7),
                (80.0, 1.1),
                (100.0, 0.7),
                (130.0, 0.3),
            ],
            SensorId::BoostTemperature => vec![
                (-40.0, 4.8),
                (0.0, 4.1),
                (20.0, 3.4),
                (40.0, 2.5),
                (60.0, 1.7),
                (90.0, 1.0),
                (150.0, 0.3),
            ],
        };
        Self::new(sensor, points).expect("default tables are valid")
    }
}

/// Operator-set value for each auxiliary sensor, in engineering units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub throttle_pct: f64,
    pub oil_pressure_bar: f64,
    pub boost_pressure_bar: f64,
    pub rail_pressure_bar: f64,
    pub coolant_temp_c: f64,
    pub boost_temp_c: f64,
}

impl Default for OperatingPoint {
    fn default() -> Self {
        Self {
            throttle_pct: 0.0,
            oil_pressure_bar: 3.0,
            boost_pressure_bar: 0.0,
            rail_pressure_bar: 300.0,
            coolant_temp_c: 90.0,
            boost_temp_c: 40.0,
        }
    }
}

impl OperatingPoint {
    pub fn get(&self, sensor: SensorId) -> f64 {
        self.as_array()[sensor.index()]
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.throttle_pct,
            self.oil_pressure_bar,
            self.boost_pressure_bar,
            self.rail_pressure_bar,
            self.coolant_temp_c,
            self.boost_temp_c,
        ]
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        for id in SensorId::ALL {
            if !self.get(id).is_finite() {
                return Err(SensorError::NonFinite(id.name().to_string()));
            }
        }
        Ok(())
    }
}

/// One lookup table per sensor plus the cached output voltages for the
/// current operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorBank {
    tables: [Option<SensorTable>; 6],
    point: OperatingPoint,
    volts: [f64; 6],
}

impl Default for SensorBank {
    fn default() -> Self {
        let tables = SensorId::ALL.map(|id| Some(SensorTable::default_for(id)));
        let mut bank = Self {
            tables,
            point: OperatingPoint::default(),
            volts: [0.0; 6],
        };
        bank.refresh();
        bank
    }
}

impl SensorBank {
    /// A bank with no tables loaded; every read fails until tables arrive.
    pub fn empty() -> Self {
        Self {
            tables: Default::default(),
            point: OperatingPoint::default(),
            volts: [0.0; 6],
        }
    }

    pub fn load_table(&mut self, table: SensorTable) {
        let idx = table.sensor.index();
        self.tables[idx] = Some(table);
        self.refresh();
    }

    pub fn load_points(&mut self, sensor: SensorId, points: Vec<(f64, f64)>) -> Result<(), SensorError> {
        self.load_table(SensorTable::new(sensor, points)?);
        Ok(())
    }

    pub fn table(&self, sensor: SensorId) -> Option<&SensorTable> {
        self.tables[sensor.index()].as_ref()
    }

    pub fn read_sensor(&self, sensor: SensorId, input: f64) -> Result<f64, SensorError> {
        self.table(sensor)
            .map(|t| t.read(input))
            .ok_or(SensorError::NoTable(sensor))
    }

    pub fn set_operating_point(&mut self, point: OperatingPoint) -> Result<(), SensorError> {
        point.validate()?;
        self.point = point;
        self.refresh();
        Ok(())
    }

    pub fn operating_point(&self) -> OperatingPoint {
        self.point
    }

    /// Output voltage of every channel at the current operating point;
    /// channels without a table read 0 V.
    pub fn volts(&self) -> [f64; 6] {
        self.volts
    }

    fn refresh(&mut self) {
        for id in SensorId::ALL {
            self.volts[id.index()] = self.read_sensor(id, self.point.get(id)).unwrap_or(0.0);
        }
    }
}
