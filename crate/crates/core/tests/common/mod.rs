#![allow(dead_code)]

use pathcot::gateway::{PromptStage, ScriptedEndpoint};
use pathcot::images::{crop_path, sha256_hex, thumbnail_path, CropRequest, ImageError, ImageProvider, ImageRef};
use pathcot::log::SlideMeta;

/// Hand-traced session on a 40000 x 20000 slide, native 40x. Field of view
/// at power m is a square of side 20000 / m around the logged center.
///
/// e0   t=0     (20000,10000) 1.25x  overview, 16000 wide: stay, later dropped as big
/// e1   t=2000  (10000, 6000) 10x    dwell A starts
/// e2   t=2500  same
/// e3   t=3600  same               dwell A ends at e4: 1.8 s -> stay (9000,5000,2000,2000)
/// e4   t=3800  (10600, 6000) 10x    pan step (moved 600 >= 1% of 2000)
/// e5   t=4200  (11200, 6000) 10x    pan step; the run e3..e5 spans 0.6 s: nothing
/// e6   t=4600  (11200, 6000) 10x    same view as e5, 0.5 s dwell: nothing
/// e7   t=4700  (10100, 6000) 10x    pan step of 0.1 s, then dwell B starts
/// e8   t=6000  same               dwell B ends at e9: 1.5 s -> stay (9100,5000,2000,2000)
/// e9   t=6200  (30000,14000) 40x    native dwell
/// e10  t=6600  same               ends at e11: 0.5 s -> peek (29488,13488,1024,1024)
/// e11  t=6700  (30000,14000) 2x     dwell until the last sample: 2.3 s -> stay 10000 wide
/// e12  t=9000  same
///
/// Stage 2 drops both low-power stays (16000 and 10000 > 0.4 * 20000).
/// Stage 3 merges A and B (IoU 3.8e6 / 4.2e6 = 0.905) into (9000,5000,2100,2000),
/// t 2000..6200, events 1..9. Stage 4 keeps both remaining actions (disjoint).
/// Stage 5 bins the 2100 side to 10x (2000 beats 4000) on center (10050,6000).
pub const GOLDEN_SESSION: &str = r#"{"session_id":"golden","pathologist_id":"p1","slide":{"slide_id":"G1","width_px":40000,"height_px":20000,"native_magnification":40,"microns_per_pixel":0.25}}
{"t_ms":0,"center_x":20000,"center_y":10000,"magnification":1.25}
{"t_ms":2000,"center_x":10000,"center_y":6000,"magnification":10}
{"t_ms":2500,"center_x":10000,"center_y":6000,"magnification":10}
{"t_ms":3600,"center_x":10000,"center_y":6000,"magnification":10}
{"t_ms":3800,"center_x":10600,"center_y":6000,"magnification":10}
{"t_ms":4200,"center_x":11200,"center_y":6000,"magnification":10}
{"t_ms":4600,"center_x":11200,"center_y":6000,"magnification":10}
{"t_ms":4700,"center_x":10100,"center_y":6000,"magnification":10}
{"t_ms":6000,"center_x":10100,"center_y":6000,"magnification":10}
{"t_ms":6200,"center_x":30000,"center_y":14000,"magnification":40}
{"t_ms":6600,"center_x":30000,"center_y":14000,"magnification":40}
{"t_ms":6700,"center_x":30000,"center_y":14000,"magnification":2}
{"t_ms":9000,"center_x":30000,"center_y":14000,"magnification":2}
"#;

pub fn slide() -> SlideMeta {
    SlideMeta {
        slide_id: "case-7".into(),
        width_px: 40000,
        height_px: 20000,
        native_magnification: 40.0,
        microns_per_pixel: Some(0.25),
    }
}

/// Serves a reference for any request; the hash is derived from the path,
/// so equal requests give equal references.
pub struct MemImages;

fn mem_ref(path: String, side: u32) -> ImageRef {
    let content_hash = sha256_hex(path.as_bytes());
    ImageRef { path, width: side, height: side, content_hash }
}

impl ImageProvider for MemImages {
    fn get_crop(&self, req: &CropRequest) -> Result<ImageRef, ImageError> {
        Ok(mem_ref(crop_path(&req.slide_id, &req.bbox), req.target_px))
    }

    fn get_thumbnail(&self, slide_id: &str) -> Result<ImageRef, ImageError> {
        Ok(mem_ref(thumbnail_path(slide_id), 1024))
    }
}

pub const FINAL_ANSWER: &str = "<final_impression>Metastatic adenocarcinoma in one node.</final_impression>

<recommendations>Confirm with cytokeratin stain.</recommendations>

<diagnostic_info>
PT_or_LN: \"LN\"
t_stage: 0
lymph_node_positive: true
positive_regions: [1,2]
suspicious_regions: []
</diagnostic_info>";

/// An endpoint whose answers ignore the conversation history.
pub fn mock_endpoint() -> ScriptedEndpoint {
    ScriptedEndpoint::new("scripted-mock")
        .respond(PromptStage::Overview, "<impression>Several nodes in fat; one looks effaced.</impression>")
        .respond(PromptStage::RoiAnalysis, "Region {region}: glands with atypia replacing nodal tissue.")
        .respond(PromptStage::FinalSummary, FINAL_ANSWER)
        .respond(PromptStage::MultilabelClassify, "Tumor deposit,Fibrosis|Tumor cell")
}
