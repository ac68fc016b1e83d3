//! Lane overlays written as binary PPM (`P6`).

use laneseq_core::geometry::{row_positions, ImageDims, Lane, Point, RowSampled};
use laneseq_core::synthdata::GrayImage;

const PALETTE: [[u8; 3]; 6] = [[230, 60, 60], [60, 200, 80], [70, 120, 240], [240, 200, 40], [200, 80, 220], [40, 210, 210]];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self { width: img.width, height: img.height, pixels: img.pixels.iter().map(|p| [*p; 3]).collect() }
    }

    /// Writes the pixel if it lies inside the image; anything else is dropped.
    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && x < i64::from(self.width) && y < i64::from(self.height) {
            self.pixels[y as usize * self.width as usize + x as usize] = c;
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn line(&mut self, a: Point, b: Point, c: [u8; 3]) {
        if !(a.x.is_finite() && a.y.is_finite() && b.x.is_finite() && b.y.is_finite()) {
            return;
        }
        // far-off endpoints only cost steps; cap them to a margin around the image
        let lim = |v: f64, ext: u32| v.clamp(-f64::from(ext), 2.0 * f64::from(ext));
        let (ax, ay) = (lim(a.x, self.width), lim(a.y, self.height));
        let (bx, by) = (lim(b.x, self.width), lim(b.y, self.height));
        let steps = (bx - ax).abs().max((by - ay).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.put((ax + t * (bx - ax)).round() as i64, (ay + t * (by - ay)).round() as i64, c);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims { width: self.width, height: self.height }
    }
}

fn path(img: &mut RgbImage, pts: &[Point], closed: bool, c: [u8; 3]) {
    for w in pts.windows(2) {
        img.line(w[0], w[1], c);
    }
    if closed && pts.len() > 2 {
        img.line(pts[pts.len() - 1], pts[0], c);
    }
}

pub fn draw_lane(img: &mut RgbImage, lane: &Lane, c: [u8; 3]) {
    match lane {
        Lane::Polyline(l) => path(img, &l.points, false, c),
        Lane::Polygon(l) => path(img, &l.vertices, true, c),
        Lane::Poly(l) => {
            let dims = img.dims();
            let pts: Vec<Point> = row_positions(dims, dims.height as usize)
                .into_iter()
                .filter_map(|y| l.x_at(y, dims).map(|x| Point::new(x, y)))
                .collect();
            path(img, &pts, false, c);
        }
    }
}

pub fn render(base: &GrayImage, lanes: &[Lane]) -> RgbImage {
    let mut img = RgbImage::from_gray(base);
    for (i, l) in lanes.iter().enumerate() {
        draw_lane(&mut img, l, PALETTE[i % PALETTE.len()]);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use laneseq_core::geometry::PolylineLane;

    #[test]
    fn out_of_bounds_segments_are_clipped() {
        let base = GrayImage::new(20, 10);
        let lane = Lane::Polyline(PolylineLane { points: vec![Point::new(-50.0, -5.0), Point::new(70.0, 30.0), Point::new(1e9, 4.0)] });
        let img = render(&base, &[lane]);
        assert_eq!(img.pixels.len(), 200);
        assert!(img.pixels.iter().any(|p| *p != [0, 0, 0]));
    }

    #[test]
    fn ppm_header_and_size() {
        let img = RgbImage::from_gray(&GrayImage::new(3, 2));
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P6\n3 2\n255\n".len() + 18);
    }
}
