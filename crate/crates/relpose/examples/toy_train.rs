//! Trains the toy backbone on the stock synthetic problem and prints the
//! loss trajectory, then compares learned depths against ground truth.

use relpose::toy::scene::SceneView;
use relpose::toy::train::{default_toy_run, train, TrainConfig};

fn main() {
    let (scenes, mut backbone) = default_toy_run(0, 4).unwrap();
    let cfg = TrainConfig::default();

    let init = backbone.clone();
    let start = std::time::Instant::now();
    let history = train(&mut backbone, &scenes, &cfg).unwrap();
    let elapsed = start.elapsed();

    for record in history.records.iter().step_by(100) {
        println!(
            "iter {:4}  selected {:?}  mean loss {:10.4}  grad norm {:9.3e}",
            record.iteration, record.selected, record.selected_mean_loss, record.gradient_norm
        );
    }
    let first = &history.records[0];
    let last = history.records.last().unwrap();
    println!(
        "initial {:.4}  final {:.4}  ratio {:.4}  ({} iters in {:.1?})",
        first.selected_mean_loss,
        last.selected_mean_loss,
        last.selected_mean_loss / first.selected_mean_loss,
        history.records.len(),
        elapsed
    );
    println!("all losses first iter: {:?}", first.scene_losses);
    println!("all losses last  iter: {:?}", last.scene_losses);

    for &s in &last.selected {
        let scene = &scenes[s];
        for (img, view) in [(2 * s, SceneView::A), (2 * s + 1, SceneView::B)] {
            for (label, net) in [("init ", &init), ("final", &backbone)] {
                let learned = net.forward(img).unwrap();
                let mut cells: Vec<usize> = (0..learned.cells()).collect();
                cells.sort_by(|&a, &b| {
                    learned.confidence().logits()[b]
                        .partial_cmp(&learned.confidence().logits()[a])
                        .unwrap()
                });
                let errors: Vec<Option<f64>> = cells
                    .iter()
                    .map(|&cell| {
                        scene
                            .points
                            .iter()
                            .find(|p| match view {
                                SceneView::A => p.cell_a == cell,
                                SceneView::B => p.cell_b == cell,
                            })
                            .map(|p| {
                                let gt_depth = match view {
                                    SceneView::A => p.depth_a,
                                    SceneView::B => p.depth_b,
                                };
                                (learned.depth(cell) - gt_depth).abs() / gt_depth
                            })
                    })
                    .collect();
                for k in [8, 16, scene.points.len()] {
                    let slice = &errors[..k];
                    let empty = slice.iter().filter(|e| e.is_none()).count();
                    let worst = slice.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
                    println!(
                        "image {img} {label}: top {k:2} -> {empty} empty, worst depth error {:.2}%",
                        100.0 * worst
                    );
                }
            }
        }
    }
}
