//! Pose graph optimization closing a drift-injected loop.
//!
//! Builds a square trajectory whose node estimates accumulate yaw and
//! translation drift, adds a loop closure edge, and optimizes.
//!
//!     cargo run --release --example pose_graph_closure

use nalgebra::{UnitQuaternion, Vector3, Vector6};

use collab_slam::geom::Pose;
use collab_slam::map::ElementId;
use collab_slam::optim::{edge_residual, optimize_pose_graph, retract, EdgeKind, PoseEdge, PoseGraph};

fn main() {
    let corners = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(10.0, 0.0, 0.0),
        Vector3::new(10.0, 10.0, 0.0),
        Vector3::new(0.0, 10.0, 0.0),
    ];
    let truth: Vec<Pose> = corners
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), i as f64 * std::f64::consts::FRAC_PI_2);
            Pose::new(yaw, *t)
        })
        .collect();
    let id = |i: usize| ElementId::new(1, 1, i as u64 + 1);

    let mut g = PoseGraph::default();
    for (i, p) in truth.iter().enumerate() {
        let drift = Vector6::new(0.0, 0.0, 0.05 * i as f64, 0.3 * i as f64, -0.2 * i as f64, 0.0);
        g.nodes.insert(id(i), if i == 0 { *p } else { retract(p, &drift) });
    }
    for i in 0..4 {
        let j = (i + 1) % 4;
        g.edges.push(PoseEdge {
            from: id(i),
            to: id(j),
            measured: truth[i].inverse().compose(&truth[j]),
            weight: 1.0,
            kind: if j == 0 { EdgeKind::Loop } else { EdgeKind::Odometry },
        });
    }
    g.fixed.insert(id(0));

    let residual_report = |g: &PoseGraph| -> f64 {
        g.edges
            .iter()
            .map(|e| edge_residual(&g.nodes[&e.from], &g.nodes[&e.to], &e.measured).norm())
            .fold(0.0, f64::max)
    };
    println!("worst edge residual before: {:.4}", residual_report(&g));

    let report = optimize_pose_graph(&mut g, 100, 1e-14).unwrap();
    println!(
        "LM: {} iterations, cost {:.3e} -> {:.3e}",
        report.iterations, report.initial_cost, report.final_cost
    );
    println!("worst edge residual after:  {:.3e}", residual_report(&g));
    for i in 0..4 {
        let (ang, dist) = truth[i].delta_to(&g.nodes[&id(i)]);
        println!("node {i}: {:.2e} m, {:.2e} rad from truth", dist, ang);
    }
}
