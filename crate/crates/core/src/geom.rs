//! Shared 2-d geometry: points and axis-aligned boxes.
//!
//! One continuous coordinate system is used everywhere: the pixel at column
//! `j`, row `i` has its center at `(x, y) = (j, i)`, so pixel areas span
//! `[-0.5, W-0.5] x [-0.5, H-0.5]`. Points are object centroids in this
//! space; a box stores its minimum corner and extents in the same units.

/// Object centroid (or any 2-d location) in pixel-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box: top-left corner plus positive extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// The box covering every pixel area of a `w` x `h` image.
    pub fn image_bounds(w: usize, h: usize) -> Self {
        BBox::new(-0.5, -0.5, w as f64, h as f64)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Intersect with the image bounds; extents may collapse to zero.
    pub fn clipped_to(&self, image_w: usize, image_h: usize) -> BBox {
        let bounds = BBox::image_bounds(image_w, image_h);
        let x0 = self.x.max(bounds.x);
        let y0 = self.y.max(bounds.y);
        let x1 = (self.x + self.w).min(bounds.x + bounds.w);
        let y1 = (self.y + self.h).min(bounds.y + bounds.h);
        BBox::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }
}
