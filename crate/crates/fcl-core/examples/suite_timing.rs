fn main() {
    let start = std::time::Instant::now();
    let report = fcl_core::gradcheck::full_suite(42, 100, 1e-5).unwrap();
    println!("{}", report.render());
    println!("all_pass={} elapsed={:?}", report.all_pass(), start.elapsed());
}
