// placeholder
pub fn run() {}
