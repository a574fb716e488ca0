const SKLEARN_COEF: [[f64; 2]; 3] = [ [-0.7219185743288558, 0.5260549727949746], [0.007243395572403413, 0.2241153138849209], [0.7146751787564521, -0.7501702866798955] ];
const SKLEARN_INTERCEPT: [f64; 3] = [1.0258841573728947, 0.601873521637142, -1.627757679010037];
const SKLEARN_PREDS: [usize; 9] = [0, 2, 2, 0, 1, 1, 0, 0, 1];
