//! SE(3) poses: composition, inversion and the row-major matrix form.

use rail::geometry::{GeometryPrimitive, Pose6D};

fn main() {
    let world_to_cam = Pose6D::from_translation(0.0, 0.0, 2.0).compose(&Pose6D::rot_z(std::f64::consts::FRAC_PI_2));
    let cam_to_marker = Pose6D::from_translation(1.0, 0.0, 0.0);
    let world_to_marker = world_to_cam.compose(&cam_to_marker);

    println!("world->marker translation {:?}", world_to_marker.translation());
    println!("marker origin in world    {:?}", world_to_marker.transform_point([0.0, 0.0, 0.0]));

    let back = world_to_marker.compose(&world_to_marker.inverse());
    println!("T * T^-1 == identity: {}", back.approx_eq(&Pose6D::identity(), 1e-12));

    let m = world_to_marker.to_row_major();
    let again = Pose6D::from_row_major(&m).expect("rigid matrix");
    println!("matrix round trip: {}", again.approx_eq(&world_to_marker, 1e-12));
    println!("json: {}", serde_json::to_string(&world_to_marker).unwrap());

    let shelf = GeometryPrimitive::Box { half_extents: [0.5, 0.2, 1.0] };
    println!("point 0.1m above shelf top: distance {:.3}", shelf.distance_to_local([0.0, 0.0, 1.1]));
}
