//! IID, label-skew and data-sharing partitions, with per-client class
//! counts, plus the data-sharing size arithmetic at CIFAR-10 scale.
//!
//!     cargo run --example partition_data

use phoenix::data::{data_sharing_split, make_toy_dataset, partition_iid, partition_label_skew, DataPlan, Dataset};
use phoenix::numeric::Tensor;

fn show(title: &str, plan: &DataPlan, data: &Dataset) {
    println!("{title}");
    print!("{}", plan.class_count_csv(data.labels(), data.num_classes()));
    println!();
}

fn main() -> phoenix::Result<()> {
    let toy = make_toy_dataset(4, 100, 8, 0)?;
    show("iid, 4 clients", &DataPlan::from_partition(&partition_iid(&toy, 4, 1)?, 1), &toy);
    show(
        "label skew, 4 clients x 2 classes",
        &DataPlan::from_partition(&partition_label_skew(&toy, 4, 2, 1)?, 1),
        &toy,
    );
    let sharing = data_sharing_split(&toy, 4, 25.0, 100.0, 2, 1)?;
    show("data sharing, beta 25%, alpha 100%", &DataPlan::from_sharing(&sharing, 1), &toy);
    println!("shared pool: {} samples\n", sharing.shared_pool.len());

    // Only labels matter for sizes, so 1x1 images stand in for CIFAR-10.
    let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
    let cifar = Dataset::new(Tensor::zeros(&[50_000, 1, 1, 1]), labels, 10)?;
    println!("{:>6} {:>6} {:>8} {:>12}", "beta", "alpha", "|G|", "client size");
    for (beta, alpha) in [(5.0, 100.0), (15.0, 100.0), (25.0, 100.0), (25.0, 25.0), (25.0, 50.0), (25.0, 75.0)] {
        let p = data_sharing_split(&cifar, 10, beta, alpha, 2, 0)?;
        let per_client = p.client_pool_size() / 10 + p.merged_subset.len();
        println!("{beta:>6} {alpha:>6} {:>8} {per_client:>12}", p.shared_pool.len());
    }
    Ok(())
}
