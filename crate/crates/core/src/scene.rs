//! Procedural reference object: a tan sphere with a face (two eyes and a
//! mouth) on the front, ears on both sides and a pale stripe down the back.
//! Features are painted by direction from the origin, so they run radially
//! through the body and only their surface shows up in renders.

use crate::field::{logit, softplus_inv, Aabb, InitMode, VoxelField};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureShape {
    /// Spherical cap of the given angular radius (degrees).
    Disk { radius_deg: f64 },
    /// Azimuth/elevation box with the given half extents (degrees).
    Band {
        half_azimuth_deg: f64,
        half_elevation_deg: f64,
    },
}

/// A colored patch on the body, centered at a direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFeature {
    pub name: &'static str,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub shape: FeatureShape,
    pub color: [f64; 3],
    /// Part of the canonical face (used to locate the face patch).
    pub face: bool,
}

impl SurfaceFeature {
    fn covers(&self, azimuth_deg: f64, elevation_deg: f64) -> bool {
        match self.shape {
            FeatureShape::Disk { radius_deg } => {
                angular_distance_deg(
                    azimuth_deg,
                    elevation_deg,
                    self.azimuth_deg,
                    self.elevation_deg,
                ) <= radius_deg
            }
            FeatureShape::Band {
                half_azimuth_deg,
                half_elevation_deg,
            } => {
                let da = (azimuth_deg - self.azimuth_deg + 180.0).rem_euclid(360.0) - 180.0;
                da.abs() <= half_azimuth_deg
                    && (elevation_deg - self.elevation_deg).abs() <= half_elevation_deg
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub resolution: usize,
    pub body_radius: f64,
    /// Activated density inside the body.
    pub body_density: f64,
    /// Activated density of empty space.
    pub empty_density: f64,
    pub body_color: [f64; 3],
    pub features: Vec<SurfaceFeature>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let dark = [0.08, 0.06, 0.05];
        SceneSpec {
            resolution: 32,
            body_radius: 0.75,
            body_density: 40.0,
            empty_density: 1e-3,
            body_color: [0.85, 0.65, 0.42],
            features: vec![
                SurfaceFeature {
                    name: "left eye",
                    azimuth_deg: -20.0,
                    elevation_deg: 14.0,
                    shape: FeatureShape::Disk { radius_deg: 10.0 },
                    color: dark,
                    face: true,
                },
                SurfaceFeature {
                    name: "right eye",
                    azimuth_deg: 20.0,
                    elevation_deg: 14.0,
                    shape: FeatureShape::Disk { radius_deg: 10.0 },
                    color: dark,
                    face: true,
                },
                SurfaceFeature {
                    name: "mouth",
                    azimuth_deg: 0.0,
                    elevation_deg: -18.0,
                    shape: FeatureShape::Band {
                        half_azimuth_deg: 18.0,
                        half_elevation_deg: 6.0,
                    },
                    color: [0.6, 0.08, 0.1],
                    face: true,
                },
                SurfaceFeature {
                    name: "left ear",
                    azimuth_deg: -90.0,
                    elevation_deg: 20.0,
                    shape: FeatureShape::Disk { radius_deg: 16.0 },
                    color: [0.4, 0.22, 0.1],
                    face: false,
                },
                SurfaceFeature {
                    name: "right ear",
                    azimuth_deg: 90.0,
                    elevation_deg: 20.0,
                    shape: FeatureShape::Disk { radius_deg: 16.0 },
                    color: [0.4, 0.22, 0.1],
                    face: false,
                },
                SurfaceFeature {
                    name: "back stripe",
                    azimuth_deg: 180.0,
                    elevation_deg: 0.0,
                    shape: FeatureShape::Band {
                        half_azimuth_deg: 12.0,
                        half_elevation_deg: 50.0,
                    },
                    color: [0.9, 0.77, 0.61],
                    face: false,
                },
            ],
        }
    }
}

impl SceneSpec {
    /// Same object without its face features.
    pub fn faceless(&self) -> SceneSpec {
        SceneSpec {
            features: self.features.iter().filter(|f| !f.face).cloned().collect(),
            ..self.clone()
        }
    }

    /// Voxelizes the object into a field over the default bbox.
    pub fn build_field(&self) -> Result<VoxelField> {
        let mut field =
            VoxelField::with_bbox(self.resolution, Aabb::default(), InitMode::Constant, 0)?;
        let n = self.resolution;
        let h = 2.0 / n as f64;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = field.cell_center(x, y, z);
                    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                    // Linear ramp one cell wide around the surface.
                    let inside = ((self.body_radius - r) / h + 0.5).clamp(0.0, 1.0);
                    let density =
                        self.empty_density + inside * (self.body_density - self.empty_density);
                    let (az, el) = if r > 1e-9 {
                        (
                            p[0].atan2(p[2]).to_degrees(),
                            (p[1] / r).asin().to_degrees(),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    let color = self
                        .features
                        .iter()
                        .rev()
                        .find(|f| f.covers(az, el))
                        .map_or(self.body_color, |f| f.color);
                    let raw_color = color.map(|c| logit(c.clamp(0.02, 0.98)) as f32);
                    let i = field.index(x, y, z);
                    field.set_raw(i, softplus_inv(density) as f32, raw_color);
                }
            }
        }
        Ok(field)
    }
}

fn angular_distance_deg(az1: f64, el1: f64, az2: f64, el2: f64) -> f64 {
    let (a1, e1, a2, e2) = (
        az1.to_radians(),
        el1.to_radians(),
        az2.to_radians(),
        el2.to_radians(),
    );
    let cos = e1.sin() * e2.sin() + e1.cos() * e2.cos() * (a1 - a2).cos();
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_cover_their_centers() {
        let s = SceneSpec::default();
        for f in &s.features {
            assert!(f.covers(f.azimuth_deg, f.elevation_deg), "{}", f.name);
        }
        assert!(s.features[5].covers(-175.0, 10.0));
    }

    #[test]
    fn body_is_dense_and_outside_is_thin() {
        let s = SceneSpec::default();
        let f = s.build_field().unwrap();
        let (d_in, c_in) = f.sample([0.0, 0.0, 0.0]).unwrap();
        let (d_out, _) = f.sample([0.95, 0.95, 0.0]).unwrap();
        assert!((d_in - 40.0).abs() < 1e-3);
        assert!(d_out < 2e-3);
        assert!((c_in[0] - 0.85).abs() < 1e-3);
    }
}
