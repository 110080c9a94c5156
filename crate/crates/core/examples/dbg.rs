use fedsurg::data::*;
use fedsurg::model::TaskSpec;
fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SiteSpec::derive(14, TaskSpec::Segmentation { class_count: 4 }, [32, 32]).unwrap();
    let _ = generate_site_dataset(&spec, 2, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let m: DatasetManifest = serde_json::from_str(&text).unwrap();
    println!("spec eq: {}", m.spec == spec);
    println!("orig palette: {:?}", spec.palette);
    println!("load palette: {:?}", m.spec.palette);
    println!("up_to_date: {:?}", dataset_up_to_date(&spec, 2, dir.path()));
}
