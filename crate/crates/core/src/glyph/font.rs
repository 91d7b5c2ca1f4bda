//! Embedded 5×7 bitmap font and its derived style variants.

pub const GLYPH_HEIGHT: usize = 7;
pub const BASE_WIDTH: usize = 5;

// One row per byte, bit 4 is the leftmost column.
const ATLAS: [(char, [u8; 7]); 16] = [
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
];

/// Characters the embedded atlas can draw, in atlas order.
pub fn supported_chars() -> impl Iterator<Item = char> {
    ATLAS.iter().map(|(c, _)| *c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FontStyle {
    Plain,
    /// Each stroke thickened one pixel to the right.
    Bold,
    /// Rows sheared right, two pixels at the top, none at the bottom.
    Italic,
}

impl FontStyle {
    pub const ALL: [FontStyle; 3] = [FontStyle::Plain, FontStyle::Bold, FontStyle::Italic];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn glyph_width(self) -> usize {
        match self {
            FontStyle::Plain => BASE_WIDTH,
            FontStyle::Bold => BASE_WIDTH + 1,
            FontStyle::Italic => BASE_WIDTH + 2,
        }
    }

    fn row_shift(self, row: usize) -> usize {
        match self {
            FontStyle::Italic => (GLYPH_HEIGHT - 1 - row) / 3,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub ink: Vec<bool>,
}

impl Bitmap {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.ink[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.ink.iter().filter(|&&b| b).count()
    }
}

pub fn glyph(ch: char, style: FontStyle) -> Option<Bitmap> {
    let rows = ATLAS.iter().find(|(c, _)| *c == ch)?.1;
    let width = style.glyph_width();
    let mut ink = vec![false; width * GLYPH_HEIGHT];
    for (y, bits) in rows.iter().enumerate() {
        let shift = style.row_shift(y);
        for x in 0..BASE_WIDTH {
            if bits & (1 << (BASE_WIDTH - 1 - x)) == 0 {
                continue;
            }
            let gx = x + shift;
            ink[y * width + gx] = true;
            if style == FontStyle::Bold {
                ink[y * width + gx + 1] = true;
            }
        }
    }
    Some(Bitmap {
        width,
        height: GLYPH_HEIGHT,
        ink,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_glyph_has_ink_in_every_style() {
        for ch in supported_chars() {
            for style in FontStyle::ALL {
                let g = glyph(ch, style).unwrap();
                assert!(g.count() > 0, "{ch} {style:?}");
                assert_eq!(g.ink.len(), g.width * g.height);
            }
        }
    }

    #[test]
    fn glyphs_are_distinct() {
        let all: Vec<_> = supported_chars().map(|c| glyph(c, FontStyle::Plain).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn bold_is_superset_and_italic_preserves_count() {
        let plain = glyph('K', FontStyle::Plain).unwrap();
        let bold = glyph('K', FontStyle::Bold).unwrap();
        let italic = glyph('K', FontStyle::Italic).unwrap();
        for y in 0..7 {
            for x in 0..5 {
                if plain.get(x, y) {
                    assert!(bold.get(x, y));
                }
            }
        }
        assert!(bold.count() > plain.count());
        assert_eq!(italic.count(), plain.count());
        assert!(italic.get(2, 0) || italic.get(6, 0));
    }

    #[test]
    fn unknown_char() {
        assert!(glyph('z', FontStyle::Plain).is_none());
    }
}
