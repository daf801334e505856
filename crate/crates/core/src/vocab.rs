/// Token id space `[0, size)`. The two highest ids are reserved: `size - 2`
/// is MASK and `size - 1` is EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Self {
        assert!(size >= 3, "vocabulary needs content ids plus MASK and EOS");
        Self { size }
    }

    pub fn mask(self) -> usize {
        self.size - 2
    }

    pub fn eos(self) -> usize {
        self.size - 1
    }

    /// Number of ordinary (non-reserved) ids.
    pub fn content(self) -> usize {
        self.size - 2
    }

    pub fn is_special(self, id: usize) -> bool {
        id == self.mask() || id == self.eos()
    }
}
