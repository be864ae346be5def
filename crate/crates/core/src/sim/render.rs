//! Synthetic camera rendering.
//!
//! View order is fixed as [left_wrist, top, right_wrist], matching the
//! importance-label convention Left=[1,0,0], Top=[0,1,0], Right=[0,0,1].
//!
//! The top view rasterizes coarse positions quantized to its 48×48 grid and
//! never reads fine offsets, so a sub-pixel offset is invisible there by
//! construction. Wrist views splat true (fine) positions bilinearly at
//! 24×24 over a 0.15-wide window, where the same offset spans more than a
//! pixel. Views that do not contain any active target get additive
//! Gaussian pixel noise, clamped back to [0,1].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Arm, Image, WorldState, TOP_RES, WRIST_RES, WRIST_WINDOW};

const GRIPPER_CLOSED_INTENSITY: f64 = 1.0;
const GRIPPER_OPEN_INTENSITY: f64 = 0.85;
const OTHER_GRIPPER_SCALE: f64 = 0.9;

/// Render the ordered view triple for a world state.
pub fn render_views(w: &WorldState, noise_sigma: f64, rng: &mut ChaCha8Rng) -> [Image; 3] {
    let left = render_wrist(w, Arm::Left, noise_sigma, rng);
    let top = render_top(w);
    let right = render_wrist(w, Arm::Right, noise_sigma, rng);
    [left, top, right]
}

fn render_top(w: &WorldState) -> Image {
    let mut img = Image::new(TOP_RES, TOP_RES);
    for obj in &w.objects {
        let intensity = if obj.done { obj.kind.intensity() * 0.5 } else { obj.kind.intensity() };
        stamp_quantized(&mut img, obj.x, obj.y, intensity);
    }
    stamp_quantized(
        &mut img,
        w.left.0,
        w.left.1,
        if w.left_closed { GRIPPER_CLOSED_INTENSITY } else { GRIPPER_OPEN_INTENSITY },
    );
    stamp_quantized(
        &mut img,
        w.right.0,
        w.right.1,
        OTHER_GRIPPER_SCALE * if w.right_closed { GRIPPER_CLOSED_INTENSITY } else { GRIPPER_OPEN_INTENSITY },
    );
    img
}

/// 5×5 stamp at the pixel cell containing (x, y); sub-cell position is
/// deliberately discarded. The footprint usually straddles patch
/// boundaries, which makes the blob position easy to read back out of
/// pooled patch features.
fn stamp_quantized(img: &mut Image, x: f64, y: f64, intensity: f64) {
    let res = img.w as i64;
    let cx = ((x * res as f64) as i64).clamp(0, res - 1);
    let cy = ((y * res as f64) as i64).clamp(0, res - 1);
    for dy in -2..=2i64 {
        for dx in -2..=2i64 {
            let px = cx + dx;
            let py = cy + dy;
            if px < 0 || py < 0 || px >= res || py >= res {
                continue;
            }
            let ring = dx.abs().max(dy.abs());
            let v = match ring {
                0 => intensity,
                1 => intensity * 0.7,
                _ => intensity * 0.35,
            };
            img.max_at(px as usize, py as usize, v as f32);
        }
    }
}

fn render_wrist(w: &WorldState, arm: Arm, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(WRIST_RES, WRIST_RES);
    let center = w.gripper(arm);
    let origin = (center.0 - WRIST_WINDOW / 2.0, center.1 - WRIST_WINDOW / 2.0);

    let mut contains_target = false;
    for (i, obj) in w.objects.iter().enumerate() {
        let fine = obj.fine_pos();
        let inside = fine.0 >= origin.0
            && fine.0 <= origin.0 + WRIST_WINDOW
            && fine.1 >= origin.1
            && fine.1 <= origin.1 + WRIST_WINDOW;
        if inside {
            // wrist views render objects bright: fine alignment reads the
            // blob's sub-pixel placement, identity comes from the top view
            let base = obj.kind.intensity().max(0.95);
            let intensity = if obj.done { base * 0.5 } else { base };
            splat(&mut img, to_px(fine, origin), intensity);
            if w.active_targets.contains(&i) {
                contains_target = true;
            }
        }
    }
    // Own gripper marker sits at the window centre.
    let own = if w.closed(arm) { GRIPPER_CLOSED_INTENSITY } else { GRIPPER_OPEN_INTENSITY };
    splat(&mut img, to_px(center, origin), own);
    // The other arm's gripper when it wanders into the window.
    let other = w.gripper(match arm {
        Arm::Left => Arm::Right,
        Arm::Right => Arm::Left,
    });
    if other.0 >= origin.0
        && other.0 <= origin.0 + WRIST_WINDOW
        && other.1 >= origin.1
        && other.1 <= origin.1 + WRIST_WINDOW
    {
        splat(&mut img, to_px(other, origin), own * OTHER_GRIPPER_SCALE);
    }

    if noise_sigma > 0.0 && !contains_target {
        for px in img.pixels.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *px = (*px as f64 + n * noise_sigma).clamp(0.0, 1.0) as f32;
        }
    }
    img
}

fn to_px(p: (f64, f64), origin: (f64, f64)) -> (f64, f64) {
    let scale = WRIST_RES as f64 / WRIST_WINDOW;
    ((p.0 - origin.0) * scale - 0.5, (p.1 - origin.1) * scale - 0.5)
}

/// Bilinear tent splat with ~2 px radius; sub-pixel motion shows up as a
/// smooth intensity shift.
fn splat(img: &mut Image, (u, v): (f64, f64), intensity: f64) {
    const R: f64 = 2.0;
    let res = img.w as i64;
    let u0 = (u - R).floor() as i64;
    let u1 = (u + R).ceil() as i64;
    let v0 = (v - R).floor() as i64;
    let v1 = (v + R).ceil() as i64;
    for py in v0..=v1 {
        for px in u0..=u1 {
            if px < 0 || py < 0 || px >= res || py >= res {
                continue;
            }
            let wu = (1.0 - (px as f64 - u).abs() / R).max(0.0);
            let wv = (1.0 - (py as f64 - v).abs() / R).max(0.0);
            let val = intensity * wu * wv;
            if val > 0.0 {
                img.max_at(px as usize, py as usize, val as f32);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ObjectKind, ObjectState, RestPose};
    use rand::SeedableRng;

    fn world_with_object(fine_dx: f64, fine_dy: f64) -> WorldState {
        let mut w = WorldState::at_rest(&RestPose::default(), vec![ObjectState {
            kind: ObjectKind::BagCorner,
            x: 0.5,
            y: 0.5,
            fine_dx,
            fine_dy,
            done: false,
        }]);
        w.left = (0.5, 0.5);
        w.active_targets = vec![0];
        w
    }

    #[test]
    fn fine_offset_visible_in_wrist_invisible_in_top() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w0 = world_with_object(0.0, 0.0);
        let w1 = world_with_object(0.01, 0.0);
        let v0 = render_views(&w0, 0.0, &mut rng);
        let v1 = render_views(&w1, 0.0, &mut rng);
        // top view bit-identical
        assert_eq!(v0[1].pixels, v1[1].pixels);
        // left wrist view differs
        assert_ne!(v0[0].pixels, v1[0].pixels);
    }

    #[test]
    fn zero_noise_is_pure_function_of_world() {
        let w = world_with_object(0.004, -0.002);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let a = render_views(&w, 0.0, &mut r1);
        let b = render_views(&w, 0.0, &mut r2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn empty_object_list_renders_markers_only() {
        let w = WorldState::at_rest(&RestPose::default(), vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = render_views(&w, 0.0, &mut rng);
        // top view: both gripper stamps present, nothing else
        let lit = views[1].pixels.iter().filter(|&&p| p > 0.0).count();
        assert!(lit > 0 && lit <= 50);
        // wrist views: own centre marker lit (tent peak lands between pixels)
        assert!(views[0].pixels.iter().any(|&p| p > 0.3));
    }

    #[test]
    fn irrelevant_view_gets_noise() {
        let mut w = world_with_object(0.0, 0.0);
        // target far from the right wrist window
        w.right = (0.9, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let views = render_views(&w, 0.15, &mut rng);
        let noisy = views[2].pixels.iter().filter(|&&p| p > 0.0).count();
        assert!(noisy > WRIST_RES * WRIST_RES / 4, "expected widespread noise, got {noisy} lit pixels");
        // left wrist contains the target: stays clean (background exactly 0)
        let clean_zeros = views[0].pixels.iter().filter(|&&p| p == 0.0).count();
        assert!(clean_zeros > WRIST_RES * WRIST_RES / 2);
    }
}
