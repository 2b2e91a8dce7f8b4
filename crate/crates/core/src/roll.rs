//! Binary pianoroll and mixture grids.
//!
//! A [`Pianoroll`] is a `(time, pitch, instrument)` grid of on/off cells and a
//! [`Mixture`] is the same music with the instrument axis collapsed. Cells are
//! stored row-major in `(t, p, c)` order.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Sixteenth-note steps per phrase.
pub const TIME_STEPS: usize = 64;
/// Pitch rows per phrase.
pub const PITCHES: usize = 72;
/// Instrument channels per phrase.
pub const INSTRUMENTS: usize = 5;
/// MIDI pitch of pitch row 0.
pub const LOWEST_PITCH: u8 = 24;
/// MIDI pitch of the last pitch row.
pub const HIGHEST_PITCH: u8 = LOWEST_PITCH + PITCHES as u8 - 1;
/// Sixteenth-note steps in one 4/4 bar.
pub const STEPS_PER_BAR: usize = 16;

/// The five instrument classes, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Instrument {
    Piano = 0,
    Guitar = 1,
    Bass = 2,
    String = 3,
    Drum = 4,
}

impl Instrument {
    pub const ALL: [Instrument; INSTRUMENTS] = [
        Instrument::Piano,
        Instrument::Guitar,
        Instrument::Bass,
        Instrument::String,
        Instrument::Drum,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Instrument::Piano => "piano",
            Instrument::Guitar => "guitar",
            Instrument::Bass => "bass",
            Instrument::String => "string",
            Instrument::Drum => "drum",
        }
    }
}

/// Shape of a pianoroll.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RollDims {
    pub time: usize,
    pub pitch: usize,
    pub channels: usize,
}

impl RollDims {
    pub const PHRASE: RollDims = RollDims {
        time: TIME_STEPS,
        pitch: PITCHES,
        channels: INSTRUMENTS,
    };

    pub fn new(time: usize, pitch: usize, channels: usize) -> Self {
        Self {
            time,
            pitch,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.time * self.pitch * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mixture_len(&self) -> usize {
        self.time * self.pitch
    }
}

impl Default for RollDims {
    fn default() -> Self {
        Self::PHRASE
    }
}

/// Binary `(time, pitch, instrument)` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pianoroll {
    dims: RollDims,
    cells: Vec<bool>,
}

impl Pianoroll {
    /// An empty phrase of the standard `(64, 72, 5)` shape.
    pub fn new() -> Self {
        Self::zeros(RollDims::PHRASE)
    }

    pub fn zeros(dims: RollDims) -> Self {
        Self {
            dims,
            cells: vec![false; dims.len()],
        }
    }

    pub fn from_cells(dims: RollDims, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != dims.len() {
            return Err(Error::contract(format!(
                "pianoroll of {dims:?} needs {} cells, got {}",
                dims.len(),
                cells.len()
            )));
        }
        Ok(Self { dims, cells })
    }

    pub fn dims(&self) -> RollDims {
        self.dims
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    fn offset(&self, t: usize, p: usize, c: usize) -> usize {
        debug_assert!(t < self.dims.time && p < self.dims.pitch && c < self.dims.channels);
        (t * self.dims.pitch + p) * self.dims.channels + c
    }

    pub fn get(&self, t: usize, p: usize, c: usize) -> bool {
        self.cells[self.offset(t, p, c)]
    }

    pub fn set(&mut self, t: usize, p: usize, c: usize, on: bool) {
        let i = self.offset(t, p, c);
        self.cells[i] = on;
    }

    pub fn active_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn density(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.active_count() as f64 / self.cells.len() as f64
    }

    /// Cells of the `[start, start + len)` time slice as a new roll.
    pub fn time_slice(&self, start: usize, len: usize) -> Result<Pianoroll> {
        if start + len > self.dims.time {
            return Err(Error::contract(format!(
                "time slice {start}..{} exceeds roll length {}",
                start + len,
                self.dims.time
            )));
        }
        let row = self.dims.pitch * self.dims.channels;
        let dims = RollDims::new(len, self.dims.pitch, self.dims.channels);
        Ok(Pianoroll {
            dims,
            cells: self.cells[start * row..(start + len) * row].to_vec(),
        })
    }

    /// The roll as an `f32`/`f64` tensor of shape `(1, time, pitch, channels)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.cells.iter().map(|&c| c as u8 as f32).collect();
        let d = self.dims;
        Ok(Tensor::from_vec(data, (1, d.time, d.pitch, d.channels), device)?.to_dtype(dtype)?)
    }

    /// Reads a `(time, pitch, channels)` tensor, treating values `>= 0.5` as active.
    pub fn from_tensor_threshold(tensor: &Tensor, threshold: f64) -> Result<Pianoroll> {
        let (time, pitch, channels) = tensor.dims3()?;
        let values = tensor.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let cells = values.into_iter().map(|v| v >= threshold).collect();
        Pianoroll::from_cells(RollDims::new(time, pitch, channels), cells)
    }
}

impl Default for Pianoroll {
    fn default() -> Self {
        Self::new()
    }
}

/// Binary `(time, pitch)` grid with the instrument axis collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mixture {
    time: usize,
    pitch: usize,
    cells: Vec<bool>,
}

impl Mixture {
    pub fn zeros(time: usize, pitch: usize) -> Self {
        Self {
            time,
            pitch,
            cells: vec![false; time * pitch],
        }
    }

    pub fn from_cells(time: usize, pitch: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != time * pitch {
            return Err(Error::contract(format!(
                "mixture of ({time}, {pitch}) needs {} cells, got {}",
                time * pitch,
                cells.len()
            )));
        }
        Ok(Self { time, pitch, cells })
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn pitch(&self) -> usize {
        self.pitch
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, t: usize, p: usize) -> bool {
        self.cells[t * self.pitch + p]
    }

    pub fn set(&mut self, t: usize, p: usize, on: bool) {
        self.cells[t * self.pitch + p] = on;
    }

    pub fn active_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn density(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.active_count() as f64 / self.cells.len() as f64
    }

    pub fn is_silent(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// True when every active cell of `self` is also active in `other`.
    pub fn is_subset_of(&self, other: &Mixture) -> bool {
        self.time == other.time
            && self.pitch == other.pitch
            && self
                .cells
                .iter()
                .zip(&other.cells)
                .all(|(&a, &b)| !a || b)
    }

    /// The mask as a tensor of shape `(1, time, pitch, 1)`, ready to broadcast
    /// over the instrument axis.
    pub fn to_mask_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.cells.iter().map(|&c| c as u8 as f32).collect();
        Ok(Tensor::from_vec(data, (1, self.time, self.pitch, 1), device)?.to_dtype(dtype)?)
    }
}

/// Collapses the instrument axis: a mixture cell is on when any instrument
/// plays that pitch at that step.
pub fn mixture_from_roll(roll: &Pianoroll) -> Mixture {
    let d = roll.dims();
    let cells = roll
        .cells()
        .chunks(d.channels.max(1))
        .map(|channels| channels.iter().any(|&c| c))
        .collect::<Vec<_>>();
    if d.channels == 0 {
        return Mixture::zeros(d.time, d.pitch);
    }
    Mixture {
        time: d.time,
        pitch: d.pitch,
        cells,
    }
}

/// Stacks mixtures into a `(batch, time, pitch, 1)` mask tensor.
pub fn stack_masks(mixtures: &[&Mixture], dtype: DType, device: &Device) -> Result<Tensor> {
    let tensors = mixtures
        .iter()
        .map(|m| m.to_mask_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&tensors, 0)?)
}

/// Stacks rolls into a `(batch, time, pitch, channels)` tensor.
pub fn stack_rolls(rolls: &[&Pianoroll], dtype: DType, device: &Device) -> Result<Tensor> {
    let tensors = rolls
        .iter()
        .map(|r| r.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&tensors, 0)?)
}
