use dbsn_core::estimator::cnn_est_forward;
use dbsn_core::selftest::desk_stage1;

#[test]
fn hit_rate_on_criterion6_model() {
    let desk = desk_stage1().unwrap();
    let truth = (25.0f64 / 255.0).powi(2);
    for idx in [0usize, 3] {
        let img = &desk.noisy[idx];
        let id = img.id.as_deref().unwrap();
        let est = desk.model.registry.get(id).unwrap();
        let field = cnn_est_forward(est, &img.data).unwrap();
        let mut hits = 0;
        let mut vs = vec![];
        for i in 0..64 {
            for j in 0..64 {
                let v = field.mat_at(i, j).get(0, 0);
                vs.push(v);
                if (v - truth).abs() / truth <= 0.20 { hits += 1; }
            }
        }
        vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("{id}: hit rate {:.1}%  p5={:.5} p50={:.5} p95={:.5} (truth {truth:.5})",
            100.0 * hits as f64 / 4096.0, vs[204], vs[2048], vs[3891]);
    }
}
