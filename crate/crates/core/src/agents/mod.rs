//! Profile, video and reason agents over pluggable text backends.
//!
//! The profile agent summarizes a user's history and may ask for a video
//! analysis by replying with a `CALL_VIDEO_AGENT(<video_id>)` line. The
//! reason agent then predicts the user's reaction to a candidate video.

mod backend;
mod pipeline;
mod prompts;

pub use backend::*;
pub use pipeline::*;
pub use prompts::*;
