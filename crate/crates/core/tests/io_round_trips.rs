use facecap::fixtures::{random_params, HeadConfig, HeadFixture};
use facecap::io::{from_json, read_obj, read_pfm, to_json, write_obj, write_pfm};
use facecap::{BlendshapeRig, Image, PoseParams};

#[test]
fn fixture_mesh_survives_obj() {
    let head = HeadFixture::new(&HeadConfig {
        n_theta: 12,
        n_phi: 16,
        texture_size: 16,
    });
    let mut buf = Vec::new();
    write_obj(&head.mesh, &mut buf).unwrap();
    let back = read_obj(&buf[..]).unwrap();
    // markers are not referenced by faces, so their UVs are not recovered
    let n = back.vertices.len();
    assert_eq!(n, head.mesh.vertices.len());
    assert_eq!(back.triangles, head.mesh.triangles);
    for (a, b) in back.vertices.iter().zip(&head.mesh.vertices) {
        assert_eq!(a, b);
    }
    let referenced: std::collections::BTreeSet<usize> = back.triangles.iter().flatten().copied().collect();
    for v in referenced {
        assert!((back.uvs[v] - head.mesh.uvs[v]).norm() < 1e-15);
    }
}

#[test]
fn rig_and_params_survive_json() {
    let head = HeadFixture::new(&HeadConfig {
        n_theta: 8,
        n_phi: 12,
        texture_size: 8,
    });
    let text = to_json("rig", &head.rig).unwrap();
    let rig: BlendshapeRig = from_json("rig", &text).unwrap();
    assert_eq!(rig, head.rig);
    let params: Vec<PoseParams> = (0..5).map(|s| random_params(10, 10.0, 80.0, s)).collect();
    let back: Vec<PoseParams> = from_json("params", &to_json("params", &params).unwrap()).unwrap();
    assert_eq!(back, params);
}

#[test]
fn pfm_keeps_f32_precision() {
    let img = Image::from_fn(5, 4, |x, y| [x as f64 / 7.0, y as f64 / 3.0, 0.1]);
    let mut buf = Vec::new();
    write_pfm(&img, &mut buf).unwrap();
    let back = read_pfm(&buf[..]).unwrap();
    for (a, b) in back.pixels.iter().zip(&img.pixels) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-7);
        }
    }
}
